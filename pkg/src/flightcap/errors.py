"""Exception hierarchy shared by all modules."""


class FlightCapError(Exception):
    pass


class NonPositiveDepth(FlightCapError, ValueError):
    """A 3D point lies on or behind the camera plane (z <= 0)."""

    def __init__(self, message="point has non-positive depth", frame=None, joint=None):
        self.frame = frame
        self.joint = joint
        if frame is not None or joint is not None:
            message = f"{message} (frame={frame}, joint={joint})"
        super().__init__(message)


class SingularConfiguration(FlightCapError, ValueError):
    pass


class InsufficientObservations(FlightCapError, ValueError):
    pass


class ObjectBehindCamera(FlightCapError, ValueError):
    pass


class ZeroLengthBone(FlightCapError, ValueError):
    def __init__(self, joint, frame=None):
        self.joint = joint
        self.frame = frame
        where = f" at frame {frame}" if frame is not None else ""
        super().__init__(f"zero-length bone ending at joint {joint}{where}")


class ContactOutsideEpisode(FlightCapError, ValueError):
    pass


class InconsistentScene(FlightCapError, ValueError):
    pass


class NonFiniteResidual(FlightCapError, FloatingPointError):
    def __init__(self, message, x=None):
        self.x = x
        super().__init__(message)


class TrackTooShort(FlightCapError, ValueError):
    pass


class ContactSwitchMismatch(FlightCapError, ValueError):
    pass


class SpecInfeasible(FlightCapError, ValueError):
    pass


class SchemaError(FlightCapError, ValueError):
    def __init__(self, field, expected, found):
        self.field = field
        self.expected = expected
        self.found = found
        super().__init__(f"{field}: expected {expected}, found {found}")


class MisalignedGroundTruth(FlightCapError, ValueError):
    pass
