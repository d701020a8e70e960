"""Exception hierarchy.

Three families map onto the CLI exit codes: configuration problems (2),
bad or inconsistent data (3) and numerical failures (4).
"""


class IcaEncError(Exception):
    exit_code = 1


class ConfigError(IcaEncError, ValueError):
    exit_code = 2


class DataError(IcaEncError, ValueError):
    exit_code = 3


class NumericalError(IcaEncError, ArithmeticError):
    exit_code = 4


# --- file formats -----------------------------------------------------------

class MalformedHeader(DataError):
    pass


class SizeMismatch(DataError):
    pass


class NonFiniteData(DataError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class InvalidMask(DataError):
    pass


class UnsupportedDatatype(DataError):
    pass


class BadMagic(DataError):
    pass


class DimMismatch(DataError):
    pass


class MissingColumn(DataError):
    pass


class NonMonotoneOnsets(DataError):
    pass


class NegativeDuration(DataError):
    pass


class IoFailure(DataError):
    pass


# --- preprocessing ----------------------------------------------------------

class TooFewSamples(DataError):
    pass


class BandOutOfRange(ConfigError):
    pass


class EmptyAfterTrim(DataError):
    pass


class RankDeficientWarning(UserWarning):
    """Confound design was singular; a minimum-norm solution was used."""


class ConstantColumnWarning(UserWarning):
    pass


# --- ica --------------------------------------------------------------------

class NonConverged(NumericalError):
    """FastICA hit ``max_iter``; ``model`` holds the best iterate."""

    def __init__(self, message, model=None):
        super().__init__(message)
        self.model = model


class NonConvergedWarning(UserWarning):
    pass


class RankTooLow(NumericalError):
    pass


class MaskMismatch(DataError):
    pass


class GridMismatch(DataError):
    pass


# --- features / encoder / stats --------------------------------------------

class WordPastEnd(DataError):
    pass


class MissingSurprisal(DataError):
    pass


class NonPositiveProbability(DataError):
    pass


class DegenerateRegressor(DataError):
    pass


class LengthMismatch(DataError):
    pass


class NonFiniteInput(DataError):
    pass


class TooFewRows(DataError):
    pass


class EmptyParcel(DataError):
    pass


class ConstantInput(DataError):
    pass


# --- matching / synth / cli -------------------------------------------------

class AllZeroSource(DataError):
    pass


class NoSharedStory(DataError):
    pass


class TooFewSubjects(DataError):
    pass


class NetworkUnresolved(DataError):
    pass


class OverlapInfeasible(ConfigError):
    pass


class DuplicateName(DataError):
    pass
