"""
JSON documents read by the input designer: model descriptions and run configurations.

Both documents are pydantic models with a schema_version so older files can be
detected; `python cli.py schema` prints their JSON schema.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

SCHEMA_VERSION = 1

MatrixEntry = Union[float, str]


class Structure:
    FIR = "fir"
    STATE_SPACE = "state_space"
    RATIONAL = "rational"


class VappScenario:
    OPEN_LOOP_STEP = "open_loop_step"
    MPC = "mpc"


class _Document(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class NoiseDocument(_Document):
    """Monic noise filter H = C(q)/D(q); coefficients exclude the leading 1."""

    c: list[float] = Field(default_factory=list)
    d: list[float] = Field(default_factory=list)


class ModelDocument(_Document):
    schema_version: Literal[1] = SCHEMA_VERSION
    name: str = ""
    structure: Literal["fir", "state_space", "rational"]
    theta: list[float] = Field(min_length=1, description="Nominal plant parameters theta_0")
    lam: Union[float, list[list[float]]] = Field(1.0, alias="lambda", description="Noise covariance")
    n_u: int = Field(1, ge=1)
    n_y: int = Field(1, ge=1)
    noise: Optional[NoiseDocument] = None

    # fir
    order: Optional[int] = Field(None, ge=1)
    # state_space: entries are numbers, "theta<k>" or "-theta<k>" (1-based)
    a: Optional[list[list[MatrixEntry]]] = None
    b: Optional[list[list[MatrixEntry]]] = None
    c: Optional[list[list[MatrixEntry]]] = None
    # rational
    nb: Optional[int] = Field(None, ge=1)
    nf: Optional[int] = Field(None, ge=0)
    nk: int = Field(1, ge=1)

    @model_validator(mode="after")
    def check_structure_fields(self):
        if self.structure == Structure.FIR:
            if self.order is None:
                raise ValueError("fir models need 'order'")
            expected = self.order * self.n_u * self.n_y
            if len(self.theta) != expected:
                raise ValueError(f"fir model with order {self.order} needs {expected} theta entries, got {len(self.theta)}")
        elif self.structure == Structure.STATE_SPACE:
            if self.a is None or self.b is None or self.c is None:
                raise ValueError("state_space models need 'a', 'b' and 'c'")
        else:
            if self.nb is None or self.nf is None:
                raise ValueError("rational models need 'nb' and 'nf'")
            if self.n_u != 1 or self.n_y != 1:
                raise ValueError("rational models are SISO")
            if len(self.theta) != self.nb + self.nf:
                raise ValueError(f"rational model needs nb+nf={self.nb + self.nf} theta entries, got {len(self.theta)}")
        return self


class ExperimentBlock(_Document):
    gamma: float = Field(gt=0, description="Accuracy demand")
    alpha: float = Field(0.95, gt=0, lt=1, description="Confidence level")
    u_max: float = Field(gt=0)
    y_max: float = Field(gt=0)
    horizon_nu: int = Field(ge=1)
    horizon_ny: Optional[int] = Field(None, ge=1, description="Must equal horizon_nu when given")
    truncation_n: int = Field(ge=1)
    tol_j: float = Field(1e-12, gt=0)
    tol_inner: float = Field(1e-6, gt=0)
    max_inner: int = Field(50, ge=1)
    max_time: int = Field(200, ge=1)
    u_init_seed: int = Field(0, ge=0)
    tail_tolerance: float = Field(1e-6, gt=0, lt=1)

    @model_validator(mode="after")
    def check_horizons(self):
        if self.horizon_ny is not None and self.horizon_ny != self.horizon_nu:
            raise ValueError("distinct output and input horizons are not supported; set horizon_ny = horizon_nu")
        return self


class VappBlock(_Document):
    scenario: Literal["open_loop_step", "mpc"] = VappScenario.OPEN_LOOP_STEP
    length: int = Field(50, ge=2, description="Samples N in the application cost")
    reference: float = Field(1.0, description="Step amplitude (input step or output reference)")
    q_weight: float = Field(1.0, ge=0, description="MPC output tracking weight")
    r_weight: float = Field(0.001, ge=0, description="MPC input-increment weight")
    mpc_horizon: int = Field(5, ge=1)


class MonteCarloBlock(_Document):
    runs: int = Field(100, ge=0)
    seed: int = Field(0, ge=0)
    lambda_override: Optional[float] = Field(None, ge=0, description="Replace the noise variance for validation")


class RunConfig(_Document):
    schema_version: Literal[1] = SCHEMA_VERSION
    model: str = Field(description="Path to the model document, relative to the config file")
    experiment: ExperimentBlock
    vapp: VappBlock = Field(default_factory=VappBlock)
    monte_carlo: MonteCarloBlock = Field(default_factory=MonteCarloBlock)
    output_dir: Optional[str] = None

    def resolve_model_path(self, config_path):
        """Model document location resolved against the config's directory."""
        path = Path(self.model)
        if not path.is_absolute():
            path = Path(config_path).resolve().parent / path
        return path


def schemas():
    return {
        "RunConfig": RunConfig.model_json_schema(),
        "ModelDocument": ModelDocument.model_json_schema(by_alias=True),
    }
