"""Exception hierarchy shared across the package."""


class LrelabError(Exception):
    """Base class for every error raised by lrelab."""


class ConfigError(LrelabError, ValueError):
    """An invalid configuration value. ``field`` names the offending entry."""

    def __init__(self, field, message):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")


class InputError(LrelabError, ValueError):
    pass


class NumericError(LrelabError, ArithmeticError):
    pass


class FormatError(LrelabError, ValueError):
    """A checkpoint or operator file that cannot be read back."""


class ParseError(LrelabError, ValueError):
    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        loc = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{loc}: {message}")


class VocabError(LrelabError, KeyError):
    def __init__(self, word):
        self.word = word
        super().__init__(f"word not in vocabulary: {word!r}")

    def __str__(self):
        return self.args[0]


class SplitError(LrelabError, ValueError):
    pass


class EstimationError(LrelabError, ValueError):
    pass


class OperatorError(LrelabError, ValueError):
    pass


class EvaluationError(LrelabError, ValueError):
    pass


class ProtocolError(EvaluationError):
    """Test pairs overlap with the pairs an operator was estimated from."""


class TrainingError(LrelabError, RuntimeError):
    def __init__(self, step, message):
        self.step = step
        super().__init__(f"step {step}: {message}")
