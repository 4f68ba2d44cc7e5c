"""Exception hierarchy shared across the pipeline."""

from __future__ import annotations


class Crash2SceneError(Exception):
    """Base class for every error raised by this package."""


class ReportLoadError(Crash2SceneError):
    """A report directory is missing a required part or a part is unreadable."""


class ImageFormatError(ReportLoadError):
    """The sketch file exists but cannot be decoded as an image."""


class MetadataError(Crash2SceneError):
    """Metadata rows contradict each other or fail validation."""


class TransportError(Crash2SceneError):
    """The model provider could not be reached after all retries."""


class GatewayConfigError(Crash2SceneError):
    """Provider selection or credentials are missing/inconsistent."""


class SchemaError(Crash2SceneError):
    """A structured model response is missing a required section or field."""


class NumericFieldError(SchemaError):
    """A structured field failed numeric conversion; carries the token."""

    def __init__(self, field: str, token: str):
        super().__init__(f"field {field!r}: cannot parse numeric value from {token!r}")
        self.field = field
        self.token = token


class ClassificationError(Crash2SceneError):
    """A component could not be assigned one of the six labels."""

    def __init__(self, component_id: int, detail: str = ""):
        msg = f"component {component_id} could not be classified"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.component_id = component_id


class SketchStructureError(Crash2SceneError):
    """The sketch lacks the structure a tree kind needs (e.g. no road)."""


class EmptyTreeError(SketchStructureError):
    """A tree kind requiring road users was requested on a user-free sketch."""


class LayoutSpecError(Crash2SceneError):
    """A road layout spec violates its own category constraints."""


class EmissionError(Crash2SceneError):
    """A document could not be emitted; names the offending object."""


class CompositionError(Crash2SceneError):
    """No element sequence covers an event in the semantic description."""


class InstantiationError(Crash2SceneError):
    """Placeholder substitution failed; names the placeholder."""


class ParamRangeError(InstantiationError):
    """A placeholder value falls outside its declared bounds."""


class ScenarioValidationError(Crash2SceneError):
    """A scenario document fails structural validation; lists the problems."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class PlacementError(Crash2SceneError):
    """No free slot exists for a requested NPC placement."""


class ActorLookupError(Crash2SceneError, KeyError):
    """A referenced actor does not exist in the trace/template."""


class UnsupportedFeatureError(Crash2SceneError):
    """The document references a feature outside the supported subset."""


class SimulationError(Crash2SceneError):
    """The simulation inputs are invalid (bad dt, broken references)."""


class OptimizationError(Crash2SceneError):
    """Optimizer preconditions are violated (empty bounds, no placeholders)."""


class MetricsInputError(Crash2SceneError, ValueError):
    """Metric computation received an empty or mismatched input set."""


class ConfigError(Crash2SceneError):
    """The pipeline configuration file or environment overrides are invalid."""


class StageError(Crash2SceneError):
    """A pipeline stage cannot run or failed; carries the stage name."""

    def __init__(self, stage: str, needed: str | None = None, message: str | None = None):
        if message is None:
            message = f"stage {stage!r} requires output of stage {needed!r}; run it first"
        super().__init__(message)
        self.stage = stage
        self.needed = needed
