class DepthFusionError(Exception):
    pass


class ConfigError(DepthFusionError):
    pass


class GeometryError(DepthFusionError):
    pass


class MeshIOError(DepthFusionError):
    pass


class RigError(DepthFusionError):
    pass


class MapSetError(DepthFusionError):
    """Problem loading or writing a map set; names the view and file involved."""

    def __init__(self, message, view=None, path=None):
        super().__init__(message)
        self.view = view
        self.path = path


class MissingMapFileError(MapSetError):
    pass


class MapHeaderError(MapSetError):
    pass


class MapDimensionError(MapSetError):
    pass


class ValidationError(DepthFusionError):
    def __init__(self, violations):
        self.violations = list(violations)
        first = self.violations[0] if self.violations else None
        message = f"{len(self.violations)} map set violation(s)"
        if first is not None:
            message += f", first: {first}"
        super().__init__(message)


class IcpError(DepthFusionError):
    pass


class FusionError(DepthFusionError):
    pass


class ContourError(DepthFusionError):
    pass


class MetricsError(DepthFusionError):
    pass


class VoxelizationError(MetricsError):
    pass
