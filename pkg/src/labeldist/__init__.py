"""Ground-truth label distributions from sparse, noisy annotator labels."""

from .core import (AnnotationMatrix, DatasetSplit, ValidationError, argmax_label,
                   empirical_dist, kl_divergence)
from .em import EMConfig, fit_em
from .genmodel import Hyperparams, gen_graph, random_assignment
from .pgm import PgmState
from .sa import AnnealConfig, anneal

__version__ = "0.1.0"

__all__ = [
    "AnnotationMatrix", "DatasetSplit", "ValidationError", "argmax_label", "empirical_dist",
    "kl_divergence", "EMConfig", "fit_em", "Hyperparams", "gen_graph", "random_assignment",
    "PgmState", "AnnealConfig", "anneal",
]
