"""
Reverse-Mode Differentiation Engine
Dense float64 tensors, a tape that records one forward pass, the parameter
store with Adam moment buffers, and a central-difference gradient checker
"""

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from services.errors import NumericalError, OptimizerStateError, ShapeError, TapeConsumedError

logger = logging.getLogger(__name__)

_state = threading.local()


class Tensor:
    """Dense float64 array with an optional gradient"""

    __slots__ = ('data', 'requires_grad', 'grad', 'name', 'is_leaf')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, is_leaf: bool = True):
        self.data = np.array(data, dtype=np.float64) if is_leaf else np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.is_leaf = is_leaf

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f' {self.name}' if self.name else ''
        return f'<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>'


def constant(data) -> Tensor:
    """Tensor that never receives gradients"""
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad=False)


@dataclass
class _Record:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """
    Ordered record of the differentiable operations of one forward pass

    Used as a context manager; operations executed inside the block are
    recorded when any of their inputs requires a gradient. A tape supports
    exactly one backward pass.
    """

    def __init__(self):
        self._records: List[_Record] = []
        self.consumed = False

    def __enter__(self) -> 'Tape':
        stack = getattr(_state, 'stack', None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self._records)

    def append(self, record: _Record) -> None:
        if self.consumed:
            raise TapeConsumedError("Cannot record on a tape that was already consumed")
        self._records.append(record)

    def backward(self, loss: Tensor) -> None:
        """
        Accumulate d(loss)/d(leaf) into every leaf tensor's .grad

        Args:
            loss: scalar tensor produced on this tape
        """
        if self.consumed:
            raise TapeConsumedError("backward() was already called on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        if not loss.requires_grad:
            logger.debug("Loss does not depend on any trainable tensor")
            self._records.clear()
            return

        pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for record in reversed(self._records):
            upstream = pending.pop(id(record.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(record.inputs, record.backward_fn(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                grad = np.asarray(grad, dtype=np.float64).reshape(tensor.shape)
                if tensor.is_leaf:
                    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
                else:
                    key = id(tensor)
                    pending[key] = grad if key not in pending else pending[key] + grad
        self._records.clear()


def active_tape() -> Optional[Tape]:
    stack = getattr(_state, 'stack', None)
    return stack[-1] if stack else None


def record(op: str, out_data: np.ndarray, inputs: Iterable[Tensor],
           backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """
    Wrap an op result and record it on the active tape

    Args:
        op: operation name (for diagnostics)
        out_data: forward result
        inputs: operand tensors, in the order backward_fn returns gradients
        backward_fn: maps the upstream gradient to one gradient per input

    Returns:
        Output tensor
    """
    if not np.all(np.isfinite(out_data)):
        raise NumericalError(f"{op} produced non-finite values")
    inputs = tuple(inputs)
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad, name=op, is_leaf=False)
    if needs_grad:
        tape.append(_Record(op, out, inputs, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Run the backward pass of tape from loss"""
    tape.backward(loss)


# ================================================
# PARAMETERS & OPTIMIZER
# ================================================

class ParamStore:
    """Named trainable tensors, non-trainable buffers and Adam moments"""

    def __init__(self):
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.first_moment: Dict[str, np.ndarray] = {}
        self.second_moment: Dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, data) -> Tensor:
        if name in self.params or name in self.buffers:
            raise KeyError(f"Parameter {name!r} already exists")
        tensor = Tensor(data, requires_grad=True, name=name)
        self.params[name] = tensor
        self.first_moment[name] = np.zeros_like(tensor.data)
        self.second_moment[name] = np.zeros_like(tensor.data)
        return tensor

    def add_buffer(self, name: str, data) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise KeyError(f"Buffer {name!r} already exists")
        self.buffers[name] = np.array(data, dtype=np.float64)
        return self.buffers[name]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> List[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    def has_grads(self) -> bool:
        return any(t.grad is not None for t in self.params.values())

    def snapshot(self) -> Dict[str, Dict[str, np.ndarray]]:
        """Copy of parameter values and buffers"""
        return {
            'params': {k: t.data.copy() for k, t in self.params.items()},
            'buffers': {k: v.copy() for k, v in self.buffers.items()},
        }

    def restore(self, snapshot: Dict[str, Dict[str, np.ndarray]]) -> None:
        for name, value in snapshot['params'].items():
            self.params[name].data[...] = value
        for name, value in snapshot['buffers'].items():
            self.buffers[name][...] = value

    def __repr__(self):
        return f'<ParamStore tensors={len(self.params)} parameters={self.num_parameters()}>'


def adam_step(params: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """
    One Adam update with bias correction; clears gradients afterwards

    Parameters without a gradient this step are treated as having a zero
    gradient (their moments still decay).

    Args:
        params: store with populated gradients
        lr: learning rate
        beta1, beta2: moment decay rates
        eps: denominator guard
    """
    if not params.has_grads():
        raise OptimizerStateError("adam_step called before backward populated any gradient")
    params.step_count += 1
    t = params.step_count
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name, tensor in params.params.items():
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        m = params.first_moment[name]
        v = params.second_moment[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        tensor.grad = None


# ================================================
# GRADIENT CHECKING
# ================================================

def gradient_check(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
                   floor: float = 1e-6) -> float:
    """
    Compare tape gradients against central finite differences

    Args:
        loss_fn: builds the scalar loss from the current tensor values;
            it must be deterministic
        tensors: leaf tensors (requires_grad=True) to check
        h: finite-difference step
        floor: lower bound of the relative-error denominator

    Returns:
        Maximum elementwise relative error |a - n| / max(|a| + |n|, floor)
    """
    for tensor in tensors:
        tensor.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst = 0.0
    for tensor, grad in zip(tensors, analytic):
        flat = tensor.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = loss_fn().item()
            flat[i] = original - h
            minus = loss_fn().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * h)
            a = grad.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), floor))
    return worst
