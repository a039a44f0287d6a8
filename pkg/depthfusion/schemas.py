from typing import Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

# Depth slack of the occlusion test and default ICP rejection radius, in pixels.
DEFAULT_SLACK_PIXELS = 4.0
# A view whose median point-to-plane residual is below this many pixels is already aligned.
SETTLE_PIXELS = 0.05


class RigParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    width: int = Field(256, ge=2)
    height: int = Field(256, ge=2)
    up_axis: Tuple[float, float, float] = (0.0, 1.0, 0.0)

    @field_validator("up_axis")
    @classmethod
    def _nonzero_up(cls, value):
        if sum(x * x for x in value) == 0.0:
            raise ValueError("up_axis must be non-zero")
        return value


class FusionConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    w1: float = Field(1.0, ge=0.0, description="network depth fidelity")
    w2: float = Field(1.0, ge=0.0, description="tangent/normal orthogonality")
    w3: float = Field(0.3, ge=0.0, description="cross-view depth consistency")
    w4: float = Field(0.3, ge=0.0, description="cross-view tangent/normal consistency")
    occlusion_threshold: Optional[float] = Field(None, gt=0.0, description="defaults to 4 pixels (4*kappa)")
    grazing_angle: float = Field(75.0, gt=0.0, le=90.0, description="degrees; steeper target pixels take no correspondences")
    normal_agreement: float = Field(45.0, gt=0.0, le=180.0, description="degrees between source and target normals")
    outer_iterations: int = Field(5, ge=1)
    energy_tolerance: float = Field(1e-4, ge=0.0, description="early exit on relative energy change")
    cg_tolerance: float = Field(1e-8, gt=0.0)
    cg_max_iterations: int = Field(2000, ge=1)
    remove_outliers: bool = True

    def depth_only(self) -> "FusionConfig":
        """Same weights with every normal-driven term switched off."""
        return self.model_copy(update={"w2": 0.0, "w4": 0.0})

    def occlusion_threshold_for(self, kappa: float) -> float:
        if self.occlusion_threshold is not None:
            return self.occlusion_threshold
        return DEFAULT_SLACK_PIXELS * kappa


class IcpParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_iterations: int = Field(30, ge=1, description="per rejection level")
    rejection_distance: Optional[float] = Field(None, gt=0.0, description="defaults to 4*kappa; unset means no limit")
    coarse_levels: int = Field(3, ge=1, description="rejection radius doubles per extra level")
    normal_compatibility: float = Field(45.0, gt=0.0, le=180.0, description="degrees; wider pairs are rejected")
    settle_distance: Optional[float] = Field(None, ge=0.0, description="defaults to kappa/20; unset means always align")
    rms_tolerance: float = Field(1e-8, gt=0.0)

    def resolved(self, kappa: float) -> "IcpParams":
        update = {}
        if self.rejection_distance is None:
            update["rejection_distance"] = DEFAULT_SLACK_PIXELS * kappa
        if self.settle_distance is None:
            update["settle_distance"] = SETTLE_PIXELS * kappa
        return self.model_copy(update=update) if update else self

    def rejection_schedule(self) -> Tuple[float, ...]:
        if self.rejection_distance is None:
            return (float("inf"),)
        return tuple(self.rejection_distance * 2.0 ** level for level in reversed(range(self.coarse_levels)))


class PerturbationSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    depth_offset: float = 0.0
    view_bias: float = Field(0.0, ge=0.0, description="per-view bias drawn from U(-b, b)")
    depth_noise: float = Field(0.0, ge=0.0)
    normal_noise: float = Field(0.0, ge=0.0, description="radians")
    jitter_degrees: float = Field(0.0, ge=0.0)
    jitter_translation: float = Field(0.0, ge=0.0)
    jitter_views: Optional[Tuple[int, ...]] = None
    seed: int = 0

    @property
    def is_zero(self) -> bool:
        return not any((self.depth_offset, self.view_bias, self.depth_noise, self.normal_noise,
                        self.jitter_degrees, self.jitter_translation))

    @property
    def has_jitter(self) -> bool:
        return self.jitter_degrees > 0.0 or self.jitter_translation > 0.0


class DeformWeights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    laplacian: float = Field(1.0, ge=0.0)
    contour: float = Field(0.5, ge=0.0)
    iterations: int = Field(1, ge=1, description="re-correspondence passes")
    anchor: float = Field(1e-6, ge=0.0)


class MetricParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    samples: int = Field(10000, ge=1)
    voxel_resolution: int = Field(128, ge=2)
    voxel_mode: Literal["solid", "surface"] = "solid"
    directional_chamfer: bool = False
