"""Vertical asynchronous federated learning: simulator, protocol and analysis toolkit."""
from .errors import (AnalysisError, ConfigurationError, DataError, ModelError, ProtocolError,
                     VAFLError)
from .experiment import RunConfig, build_federation, run_experiment

__all__ = ["VAFLError", "ConfigurationError", "ModelError", "DataError", "ProtocolError",
           "AnalysisError", "RunConfig", "build_federation", "run_experiment"]
__version__ = "0.1.0"
