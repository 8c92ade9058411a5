"""Exception hierarchy shared by all phenoflow modules."""


class PhenoflowError(Exception):
    """Base class for every error raised by the package."""


# ingestion / data-core
class MalformedRow(PhenoflowError):
    def __init__(self, line: int, detail: str = ""):
        self.line = line
        super().__init__(f"malformed row at line {line}" + (f": {detail}" if detail else ""))


class OutOfRange(PhenoflowError):
    def __init__(self, field: str, line: int, value=None):
        self.field = field
        self.line = line
        super().__init__(f"{field}={value!r} out of range at line {line}")


class DuplicateSample(PhenoflowError):
    def __init__(self, plot: str, year: int, week: float):
        self.plot, self.year, self.week = plot, year, week
        super().__init__(f"duplicate sample for plot {plot}, year {year}, week {week}")


class EmptyWindow(PhenoflowError):
    def __init__(self, year: int, week: int):
        self.year, self.week = year, week
        super().__init__(f"no daily weather records for year {year}, week {week}")


class ConfigError(PhenoflowError):
    pass


# seasonfit / phenology
class TooFewPoints(PhenoflowError):
    pass


class NoConvergence(PhenoflowError):
    pass


class DegenerateFit(PhenoflowError):
    pass


# linstats
class ConstantPredictor(PhenoflowError):
    pass


class LengthMismatch(PhenoflowError):
    pass


class ConstantSeries(PhenoflowError):
    pass


class ZeroSlope(PhenoflowError):
    pass


# neural
class MissingWeek(PhenoflowError):
    def __init__(self, year: int, week: int):
        self.year, self.week = year, week
        super().__init__(f"weather for year {year} is missing week {week}")


class MissingSoil(PhenoflowError):
    def __init__(self, plot: str, year: int):
        self.plot, self.year = plot, year
        super().__init__(f"no soil temperature for plot {plot}, year {year}")


class TooFewSamplesInYear(PhenoflowError):
    pass


class NonFiniteLoss(PhenoflowError):
    def __init__(self, iteration: int, fold: int | None = None):
        self.iteration = iteration
        self.fold = fold
        where = f" (fold {fold})" if fold is not None else ""
        super().__init__(f"training loss became non-finite at iteration {iteration}{where}")


# explain
class InvalidCoalitionSize(PhenoflowError):
    pass


class DegenerateSystem(PhenoflowError):
    pass


class AdditivityViolation(PhenoflowError):
    pass
