"""Exception hierarchy shared by the core engines and the CLI."""


class SpPfemError(Exception):
    """Base class for every error raised by this package"""


class UnknownDensityError(SpPfemError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"Unknown density family: {name!r}")


class DensityParameterError(SpPfemError):
    pass


class UnknownShapeError(SpPfemError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"Unknown curve generator: {name!r}")


class NonexistentStabilizer(SpPfemError):
    """The minimal stabilizing function is infinite at some table node"""

    def __init__(self, theta, condition):
        self.theta = theta
        self.condition = condition
        super().__init__(
            f"k_0 is unbounded at theta={theta:.6f}: {condition}"
        )


class StabilizerTableError(SpPfemError):
    pass


class SizeMismatch(SpPfemError):
    pass


class DegenerateEdge(SpPfemError):
    def __init__(self, index, length):
        self.index = index
        self.length = length
        super().__init__(f"Edge {index} has length {length:.3e}")


class DegenerateCurve(SpPfemError):
    def __init__(self, step, index, length, mean_length):
        self.step = step
        self.index = index
        self.length = length
        self.mean_length = mean_length
        super().__init__(
            f"Step {step}: edge {index} collapsed to {length:.3e} "
            f"(mean edge length {mean_length:.3e})"
        )


class SelfIntersecting(SpPfemError):
    def __init__(self, pair):
        self.pair = pair
        super().__init__(f"Curve self-intersects at edges {pair[0]} and {pair[1]}")


class NewtonDiverged(SpPfemError):
    def __init__(self, step, iterations, residual):
        self.step = step
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"Step {step}: Newton stopped after {iterations} iterations "
            f"with residual {residual:.3e}"
        )


class SingularSystem(SpPfemError):
    pass


class ShortSeriesError(SpPfemError):
    pass


class ConfigError(SpPfemError):
    """Invalid run or study configuration

    Args:
        message: What is wrong
        key: Dotted key path inside the document, if known
        line: 1-based line of the document where the key appears, if known
    """

    def __init__(self, message, key=None, line=None, source=None):
        self.key = key
        self.line = line
        self.source = source
        where = []
        if source:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        if key:
            where.append(f"key '{key}'")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
