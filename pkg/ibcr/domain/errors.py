"""Exception hierarchy.

Every failure raised by the fabric, the verbs engine, the plugin, the
coordinator and the image codec derives from ``IbcrError`` so the CLI can map
any of them to exit code 2. ``VerbsError`` subclasses carry the offending id in
``subject``; the plugin re-raises them with the virtual id substituted.
"""


class IbcrError(Exception):
    """Base class for all runtime failures."""


# fabric


class FabricError(IbcrError):
    pass


class AddressUnknown(FabricError):
    pass


class SelfConnectRejected(FabricError):
    pass


class SendSuppressed(FabricError):
    pass


class RebindWhileActive(FabricError):
    pass


# verbs


class VerbsError(IbcrError):
    def __init__(self, reason: str, subject: int | None = None):
        self.reason = reason
        self.subject = subject
        super().__init__(reason if subject is None else f"{reason} ({subject:#x})")

    def with_subject(self, subject: int | None) -> "VerbsError":
        """Same error class and reason, different id."""
        return type(self)(self.reason, subject)


class StaleHandle(VerbsError):
    pass


class InvalidRange(VerbsError):
    pass


class InvalidTransition(VerbsError):
    pass


class RemoteUnknown(VerbsError):
    pass


class RemoteAccessError(VerbsError):
    pass


class LocalAccessError(VerbsError):
    pass


class InvalidQpState(VerbsError):
    pass


class InvalidWorkRequest(VerbsError):
    pass


class QueueFull(VerbsError):
    pass


# plugin


class PluginError(IbcrError):
    pass


class UnknownRemoteVirtualId(PluginError):
    pass


class UnknownVrkey(PluginError):
    pass


class RestartDirectoryIncomplete(PluginError):
    pass


class VirtualIdConflict(PluginError):
    pass


# coordinator


class CoordinatorError(IbcrError):
    pass


class DuplicateNode(CoordinatorError):
    pass


class RegistrationClosed(CoordinatorError):
    pass


class CheckpointAborted(CoordinatorError):
    def __init__(self, message: str, client_id: int | None = None):
        self.client_id = client_id
        super().__init__(message)


class PublishConflict(CoordinatorError):
    pass


class RestartAborted(CoordinatorError):
    pass


class UnknownNamespace(CoordinatorError):
    pass


# image


class ImageError(IbcrError):
    pass


class WriteFailed(ImageError):
    pass


class UnsupportedImage(ImageError):
    pass


class CorruptImage(ImageError):
    pass


class ImageMissing(ImageError):
    pass


# workloads / harness


class WorkloadError(IbcrError):
    pass


class WorkloadStalled(WorkloadError):
    pass


class DegenerateInputs(IbcrError):
    pass
