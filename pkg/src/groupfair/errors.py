"""Exception hierarchy shared by every module."""


class GroupFairError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class InstanceError(GroupFairError, ValueError):
    pass


class EmptyGroupArms(InstanceError):
    pass


class ArrivalProbsNotSimplex(InstanceError):
    pass


class MeanOutOfRange(InstanceError):
    pass


class OrphanArm(InstanceError):
    pass


class DegenerateKL(GroupFairError):
    pass


class QOutOfRange(GroupFairError, ValueError):
    pass


class Assumption1Violated(GroupFairError):
    pass


class NotConverged(GroupFairError):
    def __init__(self, iterations: int, detail: str = ""):
        super().__init__(f"solver did not converge after {iterations} iterations {detail}".strip())
        self.iterations = iterations


class QPNumericallySingular(GroupFairError):
    pass


class Infeasible(GroupFairError):
    pass


class UndefinedPoF(GroupFairError):
    pass


class MixedInstances(GroupFairError):
    pass


class EmptyTraces(GroupFairError):
    pass


class RankDeficient(GroupFairError):
    pass


class NoPositiveGainPoint(GroupFairError):
    pass


class SchemaMismatch(GroupFairError):
    pass


class EmptyFile(GroupFairError):
    pass


class ConstantFeature(GroupFairError):
    pass


class SingularDesign(GroupFairError):
    pass


class BoundViolated(GroupFairError):
    pass


class InstanceFailure(GroupFairError):
    """A batch item failed; carries what is needed to regenerate it."""

    def __init__(self, kind: str, G: int, seed: int, cause: Exception):
        super().__init__(f"{kind} G={G} instance seed {seed}: {type(cause).__name__}: {cause}")
        self.kind, self.G, self.seed, self.cause = kind, G, seed, cause
