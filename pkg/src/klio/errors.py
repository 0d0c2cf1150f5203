"""Exception hierarchy shared by all klio modules."""


class KlioError(Exception):
    """Base class for every error raised by klio."""


class MeasurementGapError(KlioError):
    """IMU timestamps are non-increasing or too far apart to integrate."""


class PredictionUnavailableError(KlioError):
    """No IMU samples were available to propagate the state."""


class NumericalFailureError(KlioError):
    """A matrix operation produced non-finite values or was singular."""


class NoCorrespondenceError(KlioError):
    """A nearest-neighbour query was issued against an empty map."""


class DegenerateCloudError(KlioError):
    """A cloud has too few points for the requested operation."""


class RegistrationError(KlioError):
    """Scan matching could not produce a usable pose."""


class DegenerateAlignmentError(KlioError):
    """Trajectory alignment received a collinear or coincident configuration."""


class AssociationError(KlioError):
    """No timestamp pairs could be formed between two trajectories."""


class DatasetFormatError(KlioError):
    """A file does not follow the expected on-disk format."""


class ConfigError(KlioError):
    """A configuration or scenario file is invalid."""
