from .forest import (DecisionTree, ForestParams, RandomForestModel, impurity_importances,
                     predict_proba_forest, substream, train_forest, train_tree)
from .logistic import (ConvergenceError, LogisticModel, logistic_objective, predict_proba_logistic,
                       train_logistic)

__all__ = [
    "ConvergenceError", "DecisionTree", "ForestParams", "LogisticModel", "RandomForestModel",
    "impurity_importances", "logistic_objective", "predict_proba_forest", "predict_proba_logistic",
    "substream", "train_forest", "train_logistic", "train_tree",
]
