"""Generalised boosted forests with infinitesimal-jackknife variance estimates."""

from .evaluation import CvReport, Dataset, Schema, cv_evaluate, kfold_assign, load_csv
from .family import Binomial, DegenerateMLEError, Gaussian, Poisson, get_family
from .forest import ForestModel, ForestParams, SubsampledForest, fit_forest
from .gbf import GeneralisedBoostedForest, PredictionWithVariance, combine_variance
from .io import load_model, save_model
from .tree import Tree, TreeParams, fit_tree

__version__ = "0.1.0"

__all__ = [
    "Binomial",
    "CvReport",
    "Dataset",
    "DegenerateMLEError",
    "ForestModel",
    "ForestParams",
    "Gaussian",
    "GeneralisedBoostedForest",
    "Poisson",
    "PredictionWithVariance",
    "Schema",
    "SubsampledForest",
    "Tree",
    "TreeParams",
    "combine_variance",
    "cv_evaluate",
    "fit_forest",
    "fit_tree",
    "get_family",
    "kfold_assign",
    "load_csv",
    "load_model",
    "save_model",
]
