"""Exception hierarchy shared by every rodspring module."""


class RodSpringError(Exception):
    """Base class for all errors raised by rodspring."""


class TopologyError(RodSpringError, ValueError):
    """Malformed topology graph (dangling attachment, bad parameter, ...)."""


class DegenerateSpring(RodSpringError):
    """A spring's endpoints coincide, so its direction is undefined."""

    def __init__(self, spring_id, length):
        self.spring_id = spring_id
        self.length = length
        super().__init__(
            f"spring {spring_id} is degenerate: endpoint separation {length:.3e} m < 1e-9 m"
        )


class SimulationBlowUp(RodSpringError):
    """A state component left the finite/bounded range during a rollout."""

    def __init__(self, step, max_abs):
        self.step = step
        self.max_abs = max_abs
        super().__init__(
            f"simulation blew up at step {step}: max |state component| = {max_abs:.3e}"
        )


class IdentificationError(RodSpringError):
    """Base class for parameter-fitting failures."""


class InsufficientData(IdentificationError):
    def __init__(self, n_rows, n_unknowns, group=""):
        self.n_rows = n_rows
        self.n_unknowns = n_unknowns
        where = f" ({group})" if group else ""
        super().__init__(
            f"insufficient data{where}: {n_rows} informative rows for {n_unknowns} unknowns"
        )


class RankDeficient(IdentificationError):
    """Design matrix lacks full column rank.

    ``null_space`` lists the unidentifiable parameter combinations as
    ``{name: coefficient}`` dicts, one per null-space direction.
    """

    def __init__(self, rank, n_unknowns, null_space, group=""):
        self.rank = rank
        self.n_unknowns = n_unknowns
        self.null_space = null_space
        combos = "; ".join(
            " + ".join(f"{c:+.3g}*{name}" for name, c in vec.items()) for vec in null_space[:4]
        )
        where = f" ({group})" if group else ""
        more = f" (+{len(null_space) - 4} more)" if len(null_space) > 4 else ""
        detail = f"; unidentifiable combinations: {combos}{more}" if null_space else ""
        super().__init__(f"design matrix rank {rank} < {n_unknowns} unknowns{where}{detail}")


class NonFiniteLoss(IdentificationError):
    def __init__(self, epoch):
        self.epoch = epoch
        super().__init__(f"loss became non-finite in epoch {epoch}")


class NoControlData(IdentificationError):
    """Control-scalar tuning was requested on data without control forces."""


class NonPositiveEstimate(IdentificationError):
    """A fitted physical quantity came out non-positive."""


class HorizonMismatch(RodSpringError, ValueError):
    """Two trajectories being compared have different shapes."""
