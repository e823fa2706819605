from .mlr import MlrModel, SingularSystemError, mlr_fit_closed_form, mlr_fit_gradient_descent, ridge_lambda
from .smaat import MAX_STAGES, SmaAtUNet, stage_channels
from .training import (FittedRegressor, SearchResult, SearchSpace, TrainingError, TrainLog, TrainSpec,
                       build_model, cnn_backward, cnn_forward, fit_fixed_epochs, hyper_search, load_state,
                       state_dict, train)

__all__ = [
    "MAX_STAGES", "FittedRegressor", "MlrModel", "SearchResult", "SearchSpace", "SingularSystemError",
    "SmaAtUNet", "TrainLog", "TrainSpec", "TrainingError", "build_model", "cnn_backward", "cnn_forward",
    "fit_fixed_epochs", "hyper_search", "load_state", "mlr_fit_closed_form", "mlr_fit_gradient_descent",
    "ridge_lambda", "stage_channels", "state_dict", "train",
]
