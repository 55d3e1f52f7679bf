import hashlib
from abc import ABC, abstractmethod
from typing import Dict, Iterator, List, Tuple, TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from speechqa.dpr.numerics import Parameter


class SpeechDprError(Exception):
    """
    Root of all errors raised by this package.

    The ``exit_code`` class attribute is what the command line interface returns when the error reaches it.
    """

    exit_code: int = 1


class DimensionError(SpeechDprError, ValueError):
    """Shapes do not fit the operation."""

    exit_code = 3


class SequenceTooShortError(DimensionError):
    """
    An utterance is too short for the convolution stack.

    :param utterance_id: The id of the offending utterance, if the caller knows it.
    """

    def __init__(self, message: str, utterance_id: str | None = None):
        if utterance_id is not None:
            message = f"{message} (utterance {utterance_id})"
        super().__init__(message)
        self.utterance_id = utterance_id


class LengthError(DimensionError):
    """A sentence is longer than the position embedding table."""


class EmptyInputError(SpeechDprError, ValueError):
    exit_code = 3


class ConfigError(SpeechDprError, ValueError):
    exit_code = 4


class PathError(SpeechDprError, ValueError):
    exit_code = 5


class FingerprintMismatchError(SpeechDprError, ValueError):
    exit_code = 6


class NumericalFault(SpeechDprError, ValueError):
    """
    A NaN or Inf value was found by a check.

    :param op: The name of the operation that produced the value.
    :param row: The row index, for row-wise checks such as the per-question loss.
    """

    exit_code = 7

    def __init__(self, message: str, op: str | None = None, row: int | None = None):
        if op is not None:
            message = f"{message} [op={op}]"
        if row is not None:
            message = f"{message} [row={row}]"
        super().__init__(message)
        self.op = op
        self.row = row


class DivergenceError(NumericalFault):
    """The training loss became non-finite. The step number is kept on the exception."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}", op="loss")
        self.step = step


class CoverageError(SpeechDprError, ValueError):
    exit_code = 8


class DataError(SpeechDprError, ValueError):
    """A file on disk does not have the expected content."""

    exit_code = 8


class FingerprintWarning(UserWarning):
    """Issued when an index is searched with vectors from a different checkpoint than the one that built it."""


class Module(ABC):
    """
    Abstract base class for everything that owns trainable parameters.

    Subclasses only need to implement :meth:`named_parameters`. The order in which the parameters are yielded must be
    deterministic, as the checkpoint format and the fingerprint rely on it. Nested modules should prefix the names of
    their children's parameters with the attribute name and a dot (``"layers.0.w_q"``).
    """

    @abstractmethod
    def named_parameters(self) -> Iterator[Tuple[str, "Parameter"]]:
        """
        Iterate over all parameters of this module.

        :return: An iterator over ``(qualified name, parameter)`` tuples.
        """
        pass

    def parameters(self) -> List["Parameter"]:
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> None:
        """
        Freeze all parameters. Frozen parameters are not tracked by the computation graph and the optimizer skips them.
        """
        for p in self.parameters():
            p.freeze()

    @property
    def frozen(self) -> bool:
        params = self.parameters()
        return len(params) > 0 and all(p.frozen for p in params)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.tensor.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        """
        A snapshot of all parameter values. The arrays are copies, so later training steps do not change the snapshot.
        """
        return {name: p.tensor.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """
        Load parameter values from a snapshot created by :meth:`state_dict`.

        :param state: A dictionary from qualified parameter name to array.
        :return: Nothing. The values are copied into the existing parameter tensors.
        """
        own = dict(self.named_parameters())
        missing = set(own.keys()) - set(state.keys())
        unexpected = set(state.keys()) - set(own.keys())
        if missing or unexpected:
            raise ConfigError(
                f"State does not match module. Missing: {sorted(missing)}, unexpected: {sorted(unexpected)}"
            )
        for name, param in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.tensor.data.shape:
                raise DimensionError(
                    f"Parameter {name} has shape {param.tensor.data.shape}, snapshot has {value.shape}"
                )
            param.tensor.data[...] = value

    def fingerprint(self) -> str:
        """
        A SHA-256 hash over the names, shapes and exact values of all parameters.
        """
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters(), key=lambda item: item[0]):
            data = np.ascontiguousarray(p.tensor.data, dtype="<f8")
            h.update(name.encode("utf-8"))
            h.update(repr(data.shape).encode("ascii"))
            h.update(data.tobytes())
        return h.hexdigest()
