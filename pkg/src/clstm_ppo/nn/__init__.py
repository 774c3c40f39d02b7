from .layers import LSTM, Linear, Module, Parameter, Tanh, lstm_cell_forward, rowwise_matmul, sigmoid
from .optim import Adam, clip_grad_norm, global_norm

__all__ = [
    "Adam", "LSTM", "Linear", "Module", "Parameter", "Tanh",
    "clip_grad_norm", "global_norm", "lstm_cell_forward", "rowwise_matmul", "sigmoid",
]
