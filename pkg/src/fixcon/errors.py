"""Exception hierarchy shared across the toolkit."""

from __future__ import annotations


class FixconError(Exception):
    """Base class for every error raised by this package."""


class ModelFormatError(FixconError):
    """Manifest or weight blob could not be read."""


class ValidationError(FixconError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("model validation failed: " + "; ".join(self.violations))


class GraphError(FixconError):
    """Graph analysis precondition not met (unknown node, cycle, dominance)."""


class ShapeError(FixconError):
    def __init__(self, node_id: str, message: str):
        self.node_id = node_id
        super().__init__(f"node {node_id}: {message}")


class UnknownOpError(FixconError):
    pass


class DatasetError(FixconError):
    pass


class StatsError(FixconError):
    pass


class RepairError(FixconError):
    """A repair strategy could not produce a valid candidate."""


class SelectionError(FixconError):
    """Image selection impossible, e.g. no dissimilar images left."""


class InjectionError(FixconError):
    pass


class EvaluationError(FixconError):
    def __init__(self, image_id: str, cause: Exception):
        self.image_id = image_id
        super().__init__(f"inference failed on image {image_id}: {cause}")


class RepairAborted(FixconError):
    """The repair loop hit an unrecoverable error; ``actions`` holds the log so far."""

    def __init__(self, message: str, actions: list):
        self.actions = actions
        super().__init__(message)
