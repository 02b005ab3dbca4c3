class VoiceLabError(Exception):
    """Base class for every error raised by the conversion app."""


class ConfigError(VoiceLabError):
    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class EmptySequence(VoiceLabError):
    pass


class DimensionMismatch(VoiceLabError):
    pass


class DivisibilityError(VoiceLabError):
    pass


class LengthMismatch(VoiceLabError):
    pass


class ConfigMismatch(VoiceLabError):
    pass


class NonFiniteLoss(VoiceLabError):
    def __init__(self, term: str, value: float):
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss term {term!r}: {value}")


class ToleranceExceeded(VoiceLabError):
    def __init__(self, group: str, coordinate: tuple, error: float, tolerance: float):
        self.group = group
        self.coordinate = coordinate
        self.error = error
        self.tolerance = tolerance
        super().__init__(
            f"gradient check failed in {group} at {coordinate}: "
            f"relative error {error:.3e} > {tolerance:.1e}"
        )


class CorruptContainer(VoiceLabError):
    pass


class DuplicateName(VoiceLabError):
    pass


class BadRange(VoiceLabError):
    pass


class CorpusTooSmall(VoiceLabError):
    pass


class DegenerateInput(VoiceLabError):
    pass


class OneClassOnly(VoiceLabError):
    pass


class EmptySet(VoiceLabError):
    pass
