"""
Probabilistic-programming kernel.

Programs are plain Python callables ``model(h, data)`` that talk to a handler
through two primitives:

    x = h.sample("x", Normal(0.0, 1.0))
    h.observe("y", Normal(x, 2.0), 2.0)

The handler decides where sample values come from (prior simulation, a fixed
replay sequence, a variational guide) and records every call in a Trace.
Addresses are (site id, occurrence counter) pairs, so a site called inside a
loop gets a fresh address per visit.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from sdvi.autodiff import DomainError, Scalar, value_of
from sdvi.distributions import Distribution, SupportSpec
from sdvi.errors import ConfigurationError, ModelDomainError


logger = logging.getLogger(__name__)


class Address(NamedTuple):
    site: str
    count: int

    def key(self) -> str:
        return f"{self.site}[{self.count}]"

    def as_list(self) -> List[Any]:
        return [self.site, self.count]


AddressPath = Tuple[Address, ...]


class SiteKind(str, Enum):
    SAMPLE = "sample"
    OBSERVE = "observe"


@dataclass
class TraceEntry:
    address: Address
    kind: SiteKind
    value: Any
    log_factor: Scalar
    dist: Distribution
    branching: bool = False

    @property
    def support(self) -> SupportSpec:
        return self.dist.support


@dataclass
class Trace:
    """
    One program execution.

    stopped marks an execution cut short by a discrete draw outside its
    support; such a trace has log density -inf and no return value.
    """
    entries: List[TraceEntry] = field(default_factory=list)
    scale: float = 1.0
    sample_log_density: Scalar = 0.0
    observe_log_density: Scalar = 0.0
    return_value: Any = None
    stopped: bool = False

    @property
    def log_density(self) -> Scalar:
        if self.scale == 1.0:
            return self.sample_log_density + self.observe_log_density
        return self.sample_log_density + self.scale * self.observe_log_density

    @property
    def samples(self) -> List[TraceEntry]:
        return [e for e in self.entries if e.kind is SiteKind.SAMPLE]

    @property
    def path(self) -> AddressPath:
        return tuple(e.address for e in self.entries if e.kind is SiteKind.SAMPLE)

    @property
    def draws(self) -> List[Any]:
        return [e.value for e in self.entries if e.kind is SiteKind.SAMPLE]

    def add(self, entry: TraceEntry) -> None:
        self.entries.append(entry)
        if entry.kind is SiteKind.SAMPLE:
            self.sample_log_density = self.sample_log_density + entry.log_factor
        else:
            self.observe_log_density = self.observe_log_density + entry.log_factor


@dataclass(frozen=True)
class PathDeviation:
    """Replay stopped being compatible with the supplied draws at `position`."""
    position: int
    reason: str = ""


class _Deviation(Exception):
    def __init__(self, position: int, reason: str):
        super().__init__(reason)
        self.deviation = PathDeviation(position, reason)


class _OffSupport(Exception):
    """A discrete draw with zero prior mass; the execution stops there."""


# ============================================================================
# Handlers
# ============================================================================

class Handler:
    """
    Base handler: address bookkeeping and trace recording.

    Subclasses implement _draw(address, dist, position) to choose the value
    of a sample statement.
    """

    def __init__(self, scale: float = 1.0):
        self.trace = Trace(scale=scale)
        self._counters: Dict[str, int] = {}
        self.position = 0
        self.current: Optional[Address] = None

    def _address(self, site: str) -> Address:
        count = self._counters.get(site, 0)
        self._counters[site] = count + 1
        address = Address(site, count)
        self.current = address
        return address

    def _draw(self, address: Address, dist: Distribution, position: int) -> Any:
        raise NotImplementedError

    def sample(self, site: str, dist: Distribution, branching: bool = False) -> Any:
        address = self._address(site)
        value = self._draw(address, dist, self.position)
        self.position += 1
        log_factor = dist.log_prob(value)
        self.trace.add(TraceEntry(address, SiteKind.SAMPLE, value, log_factor, dist, branching))
        if dist.support.is_discrete and value_of(log_factor) == -math.inf:
            self.trace.stopped = True
            raise _OffSupport(address.key())
        return value

    def observe(self, site: str, dist: Distribution, value: Any) -> None:
        address = self._address(site)
        log_factor = dist.log_prob(value)
        self.trace.add(TraceEntry(address, SiteKind.OBSERVE, value, log_factor, dist))

    def finish(self) -> None:
        """Hook called after the program returns."""


class PriorHandler(Handler):
    """Draws every sample site from its prior."""

    def __init__(self, rng: np.random.Generator, scale: float = 1.0):
        super().__init__(scale)
        self.rng = rng

    def _draw(self, address: Address, dist: Distribution, position: int) -> Any:
        return dist.sample(self.rng)


class ReplayHandler(Handler):
    """Consumes a fixed sequence of draws in order."""

    def __init__(self, draws: Sequence[Any], scale: float = 1.0):
        super().__init__(scale)
        self.draws = draws

    def _draw(self, address: Address, dist: Distribution, position: int) -> Any:
        if position >= len(self.draws):
            raise _Deviation(position, f"sequence exhausted at {address.key()}")
        value = self.draws[position]
        if dist.support.is_discrete:
            v = value_of(value)
            if not float(v).is_integer():
                raise _Deviation(position, f"non-integer value {v} at discrete site {address.key()}")
            return int(v)
        return value

    def finish(self) -> None:
        if self.position != len(self.draws):
            raise _Deviation(self.position, f"{len(self.draws) - self.position} draws left unconsumed")


_MODEL_ERRORS = (DomainError, FloatingPointError, ZeroDivisionError, OverflowError, np.linalg.LinAlgError)


# ============================================================================
# Programs
# ============================================================================

@dataclass(frozen=True)
class Program:
    """
    A model procedure bound to its observation data.

    batch_field names the data entry holding conditionally independent
    observations that may be subsampled; scale is the likelihood factor N/B
    of a minibatch view (1 for the full program).
    """
    name: str
    model: Callable[[Handler, Mapping[str, Any]], Any]
    data: Mapping[str, Any] = field(default_factory=dict)
    batch_field: Optional[str] = None
    scale: float = 1.0

    @property
    def full_size(self) -> int:
        if self.batch_field is None:
            raise ConfigurationError(f"program {self.name} declares no batchable data")
        return len(self.data[self.batch_field])


def execute(program: Program, handler: Handler) -> Union[Trace, PathDeviation]:
    """Run program under handler; domain errors abort with the offending address."""
    try:
        handler.trace.return_value = program.model(handler, program.data)
        handler.finish()
    except _Deviation as deviation:
        return deviation.deviation
    except _OffSupport:
        return handler.trace
    except _MODEL_ERRORS as exc:
        address = handler.current
        logger.debug("model %s aborted at %s: %s", program.name, address, exc)
        raise ModelDomainError(f"{program.name}: {exc} at {address.key() if address else 'entry'}",
                               address=address) from exc
    return handler.trace


def run_prior(program: Program, rng: np.random.Generator) -> Trace:
    trace = execute(program, PriorHandler(rng, program.scale))
    assert isinstance(trace, Trace)
    return trace


def replay(program: Program, draws: Sequence[Any]) -> Union[Trace, PathDeviation]:
    return execute(program, ReplayHandler(draws, program.scale))


def log_density_at(program: Program, draws: Sequence[Any]) -> Union[Tuple[Scalar, Trace], PathDeviation]:
    """log gamma(x) of the program at draws, with the likelihood scale applied."""
    outcome = replay(program, draws)
    if isinstance(outcome, PathDeviation):
        return outcome
    return outcome.log_density, outcome


def set_minibatch(program: Program, indices: Sequence[int]) -> Program:
    """View of program observing only data[batch_field][indices], scaled by N/B."""
    if program.batch_field is None:
        raise ConfigurationError(f"program {program.name} declares no batchable data")
    if program.scale != 1.0:
        raise ConfigurationError("minibatch views must be taken from the full program")
    idx = np.asarray(indices, dtype=int)
    if idx.size == 0:
        raise ConfigurationError("empty minibatch")
    full = np.asarray(program.data[program.batch_field])
    n = full.shape[0]
    if idx.min() < 0 or idx.max() >= n:
        raise ConfigurationError(f"minibatch indices outside 0..{n - 1}")
    data = dict(program.data)
    data[program.batch_field] = full[idx]
    return replace(program, data=data, scale=n / idx.size)


def sample_minibatch(program: Program, batch_size: int, rng: np.random.Generator) -> Program:
    n = program.full_size
    if not 1 <= batch_size <= n:
        raise ConfigurationError(f"batch size {batch_size} outside 1..{n}")
    if batch_size == n:
        return program
    return set_minibatch(program, np.sort(rng.choice(n, size=batch_size, replace=False)))
