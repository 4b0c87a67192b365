from .gradcheck import GradCheckReport, grad_check
from .io import array_hash, dumps_array, load_array, loads_array, save_array
from .rng import Streams, stream
from .tensor import (
    GradTape,
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    checked,
    clip,
    concat,
    default_dtype,
    div,
    embedding,
    exp,
    gather,
    gelu,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    minimum,
    mse,
    mul,
    neg,
    no_grad,
    parameter,
    power,
    relu,
    reshape,
    set_checked,
    set_default_dtype,
    slice_,
    softmax,
    stack,
    sub,
    sum_,
    tanh,
    transpose,
    where,
)

OP_KINDS = (
    "add", "mul", "matmul", "sum", "mean", "relu", "gelu", "softmax", "log", "exp",
    "gather", "concat", "slice", "layer_norm", "mse",
)


def forward_op(kind: str, inputs, **kwargs) -> Tensor:
    """Apply a registered op kind by name."""
    table = {
        "add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul, "sum": sum_, "mean": mean,
        "relu": relu, "gelu": gelu, "tanh": tanh, "softmax": softmax, "log_softmax": log_softmax,
        "log": log, "exp": exp, "gather": gather, "concat": lambda *xs, **kw: concat(xs, **kw),
        "slice": slice_, "layer_norm": layer_norm, "mse": mse, "minimum": minimum, "clip": clip,
        "abs": abs_,
    }
    try:
        fn = table[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)
