from .linear_gaussian import LinearGaussianSSM, exact_elbo, kalman_log_likelihood
from .rssm import (
    RSSM,
    ElboOutput,
    LatentState,
    elbo_loss,
    filter_sequence,
    gaussian_kl,
    imagine_rollout,
    unit_gaussian_loglik,
)

__all__ = [
    "RSSM", "LatentState", "ElboOutput", "elbo_loss", "filter_sequence", "gaussian_kl",
    "imagine_rollout", "unit_gaussian_loglik", "LinearGaussianSSM", "exact_elbo",
    "kalman_log_likelihood",
]
