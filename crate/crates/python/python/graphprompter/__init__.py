from ._graphprompter import (
    Graph,
    Model,
    PromptCache,
    evaluate,
    generate_kg,
    generate_sbm,
    infer,
    knn_similarity,
    pretrain,
    score,
    vote_select,
)

__all__ = [
    "Graph",
    "Model",
    "PromptCache",
    "evaluate",
    "generate_kg",
    "generate_sbm",
    "infer",
    "knn_similarity",
    "pretrain",
    "score",
    "vote_select",
]
