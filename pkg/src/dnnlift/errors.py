"""Exception hierarchy for the whole toolkit.

Every module raises a subclass of ``LiftError`` so the CLI can map failures to
stage-specific exit codes without string matching.
"""


class LiftError(Exception):
    """Base class for all toolkit errors."""


# --- listing / bundle ingestion ---

class BundleFormatError(LiftError):
    """The bundle file is not valid JSON or violates the format contract."""


class BundleValidationError(LiftError):
    """A function inside the bundle file violates an invariant."""


class ExtractionError(LiftError):
    """No usable dimension records could be extracted from a function."""


# --- layouts ---

class LayoutError(LiftError):
    """Stored data does not match the declared layout (size mismatch etc.)."""


# --- traces ---

class TraceValidationError(LiftError):
    """The trace file or its blobs violate the trace contract."""


class NotTracedError(LiftError):
    """A required tensor dump is missing from the trace."""


# --- classification ---

class ClassificationError(LiftError):
    """No operator type could be assigned to a function."""

    def __init__(self, msg, fn=None, pseudocode=None, candidates=None):
        super().__init__(msg)
        self.fn = fn
        self.pseudocode = pseudocode
        self.candidates = list(candidates or [])


class TaintExhaustedError(LiftError):
    """Taint propagation ran off the end of the window without hitting mul/add."""


class FusionResolutionError(LiftError):
    """A fused extra parameter could not be resolved to mul/add/jumpadd."""


# --- attribute recovery ---

class GeometryError(LiftError):
    """No (stride, padding) pair satisfies the output-size constraint."""


class RegionError(LiftError):
    """Memory-region arithmetic did not divide exactly."""


class RecoveryError(LiftError):
    """Simulate-forward enumeration found no configuration matching the dump."""


class CapacityError(LiftError):
    """Enumeration bound exceeded (too many concat inputs)."""


class AttrExtractionError(LiftError):
    """Expected constants are missing from the pseudocode."""


# --- graph / weights ---

class GraphAmbiguityError(LiftError):
    """More than one unmatched tensor input competes for the graph entry."""


class TraceCorruptionError(LiftError):
    """Address matching produced an impossible (cyclic) graph."""


class NeedsPatchError(LiftError):
    """Automatic repair failed; a manual patch file is required."""

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


# --- quantization ---

class QuantParseError(LiftError):
    """No shift-multiplication constant found in the pseudocode."""


class TrainingError(LiftError):
    """Substitute training diverged or was given an empty dataset."""


# --- model IR / execution ---

class EmissionError(LiftError):
    """The recovered graph is missing information required to emit the IR."""


class ExecutionError(LiftError):
    """The forward engine hit a shape mismatch or unsupported operator."""

    def __init__(self, msg, node=None):
        super().__init__(msg)
        self.node = node


# --- simulator ---

class CompileError(LiftError):
    """The synthetic compiler cannot lower the given model."""
