"""Prediction poisoning against model stealing, with the attacks and harness to evaluate it."""
from .defenses import DefendedEndpoint, DefensePolicy, SurrogateSpec, mad_perturb
from .nn import Model, TrainConfig, build_model, sgd_train
from .simplex import Budget

__version__ = "0.1.0"
