"""HTTP microservice serving causal-LM conditional log-likelihoods."""

from .app import create_app
from .lm import ByteLM, Scorer

__version__ = "0.1.0"
