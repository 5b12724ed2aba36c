"""Exception types shared across the solver suite."""


class FreestopError(Exception):
    """Base class for all solver errors."""


class InfeasibleError(FreestopError):
    """A constraint system (marginals, supplies, reachability) cannot be met."""


class UnreachableTargetError(FreestopError):
    """Target state cannot be reached on the lattice within the horizon."""


class OffLatticeError(FreestopError):
    """A point or path does not lie on the lattice nodes."""


class CFLError(FreestopError):
    """Time step violates the stability bound of the marching scheme."""


class HorizonError(FreestopError):
    """Horizon too short, or the horizon-stabilization check failed."""


class TransversalityError(FreestopError):
    """No (or no unique) zero crossing of the Hamiltonian along a trajectory."""


class ControlTieError(FreestopError):
    """Maximizing control is not unique where a unique one is required."""


class NonDifferentiableError(FreestopError):
    """A gradient was requested next to a detected kink."""
