"""
Error hierarchy for the search framework.

Every failure the engine can see is a SearchError subclass; management
commands map the subclasses onto exit codes.
"""


class SearchError(Exception):
    """Base class for all framework errors"""


# Tree edits

class EditError(SearchError):
    """A tree edit could not be applied. The message is shown to the planner verbatim."""


class UnknownNode(EditError):
    pass


class IllegalTarget(EditError):
    pass


class OutOfRange(EditError):
    pass


class EmptyFrontier(SearchError):
    """No open action is left to select"""


class EmptyInput(SearchError):
    pass


# Tasks and evaluation

class TaskFormatError(SearchError):
    pass


class LandscapeFormatError(SearchError):
    pass


class CompileFailure(SearchError):
    """A synthetic program cannot be built (unknown directive, unmet prerequisite)"""


class ManifestMismatch(SearchError):
    pass


class InfrastructureError(SearchError):
    """The evaluator itself is broken; the run aborts without spending budget"""


# Backends

class BackendUnavailable(SearchError):
    """Network or timeout failure after all retries"""


class ParseError(SearchError):
    """Planner output could not be parsed. `fragment` holds the offending text."""

    def __init__(self, message, fragment=''):
        super().__init__(message)
        self.fragment = fragment


class MalformedResponse(SearchError):
    pass


class GenerationError(SearchError):
    """Coder output did not yield a manifest-conforming program"""


# Trace store

class TraceError(SearchError):
    pass


class SnapshotChecksumError(TraceError):
    pass


class SnapshotVersionError(TraceError):
    pass


class RunLocked(TraceError):
    pass


# Command options

class OptionsError(SearchError):
    """Invalid --config file or flag combination"""
