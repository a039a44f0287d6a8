import os
from typing import Optional

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict, TomlConfigSettingsSource

from .exceptions import ConfigError
from .schemas import DeformWeights, FusionConfig, IcpParams, MetricParams, PerturbationSpec, RigParams

ENV_PREFIX = "DEPTHFUSION_"

# `--perturb key=value,...` keys and the PerturbationSpec fields they set.
PERTURB_KEYS = {
    "offset": "depth_offset",
    "bias": "view_bias",
    "noise": "depth_noise",
    "normal_noise": "normal_noise",
    "jitter_deg": "jitter_degrees",
    "jitter_t": "jitter_translation",
    "views": "jitter_views",
}


class PipelineConfig(BaseSettings):
    """Every tunable of a run.

    Priority: explicit keyword arguments (CLI flags), then environment
    variables such as ``DEPTHFUSION_FUSION__W3=0.5``, then the TOML file,
    then these defaults.
    """

    model_config = SettingsConfigDict(env_prefix=ENV_PREFIX, env_nested_delimiter="__", extra="forbid")

    rig: RigParams = RigParams()
    fusion: FusionConfig = FusionConfig()
    icp: IcpParams = IcpParams()
    icp_sweeps: int = Field(3, ge=1)
    perturb: PerturbationSpec = PerturbationSpec()
    metrics: MetricParams = MetricParams()
    deform: DeformWeights = DeformWeights()
    seed: int = 0
    threads: int = Field(1, ge=1)

    @classmethod
    def settings_customise_sources(cls, settings_cls, init_settings, env_settings, dotenv_settings,
                                   file_secret_settings):
        return init_settings, env_settings, TomlConfigSettingsSource(settings_cls)

    def perturbation(self) -> PerturbationSpec:
        """The perturbation spec, drawing from the run seed."""
        return self.perturb.model_copy(update={"seed": self.seed})


def load_config(path: Optional[str] = None, **overrides) -> PipelineConfig:
    if path is not None and not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    settings_cls = PipelineConfig
    if path is not None:
        settings_cls = type("FilePipelineConfig", (PipelineConfig,), {
            "model_config": SettingsConfigDict(toml_file=path),
        })
    try:
        return settings_cls(**overrides)
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"invalid configuration: {e}")


def parse_perturbation(text: Optional[str]) -> dict:
    """`bias=0.02,noise=0.005` -> {"view_bias": 0.02, "depth_noise": 0.005}."""
    values = {}
    if not text:
        return values
    for item in text.split(","):
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or key not in PERTURB_KEYS:
            raise ConfigError(f"bad perturbation entry {item!r}; keys are {', '.join(PERTURB_KEYS)}")
        try:
            if key == "views":
                values[PERTURB_KEYS[key]] = tuple(int(v) for v in raw.split(";") if v.strip())
            else:
                values[PERTURB_KEYS[key]] = float(raw)
        except ValueError:
            raise ConfigError(f"bad value in perturbation entry {item!r}")
    return values
