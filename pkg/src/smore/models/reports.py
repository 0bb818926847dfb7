from typing import Annotated
from pydantic import BaseModel, Field


class FlexRow(BaseModel):
    """
    Model: Structural flexibility of every variant at one depth
    Counts are exact Python integers and may exceed 64 bits
    """

    model_config = {"strict": True, "frozen": True}

    depth: Annotated[int, Field(ge=1, description="Number of layers L")]
    gamma_smore: Annotated[int, Field(ge=1, description="Distinct trees of SMoRE")]
    gamma_momor_bound: Annotated[
        int, Field(ge=1, description="Upper bound on MoMOR flexibility")
    ]
    gamma_star: Annotated[int, Field(ge=1, description="Flexibility of SMoRE*")]
    gamma_shared: Annotated[
        int, Field(ge=1, description="Flexibility of the shared-bank variant")
    ]

    @property
    def advantage(self) -> float:
        """gamma_smore / gamma_momor_bound"""
        return self.gamma_smore / self.gamma_momor_bound


class DistinctnessReport(BaseModel):
    """
    Model: Outcome of evaluating one adapter on every enumerated tree
    """

    model_config = {"strict": True}

    trees: Annotated[int, Field(ge=0, description="Trees evaluated")]
    classes: Annotated[int, Field(ge=0, description="Expected number of classes")]
    distinct_outputs: Annotated[
        int, Field(ge=0, description="Distinct outputs up to the clustering tolerance")
    ]
    min_inter_class: Annotated[
        float,
        Field(description="Smallest infinity-norm gap between outputs of different classes"),
    ]
    max_intra_class: Annotated[
        float,
        Field(ge=0.0, description="Largest gap between outputs of one class"),
    ]

    @property
    def separates(self) -> bool:
        return self.distinct_outputs == self.classes


class CostReport(BaseModel):
    """
    Model: Exact parameter or FLOP counts of one spec

    main is the plain projection term 2 d d_L; delta is the multi-layer
    overhead. Router, bias and sigma counts are kept apart from the table terms.
    """

    model_config = {"strict": True, "frozen": True}

    main: Annotated[int, Field(ge=0)]
    delta: Annotated[int, Field(ge=0)]
    router: Annotated[int, Field(ge=0, description="Router parameters or FLOPs")]
    bias: Annotated[int, Field(ge=0)] = 0
    sigma: Annotated[int, Field(ge=0, description="mlp activation parameters")] = 0
    experts: Annotated[
        int, Field(ge=0, description="Exact per-token expert propagation FLOPs")
    ] = 0

    @property
    def ratio(self) -> float:
        """delta / main"""
        return self.delta / self.main if self.main else 0.0

    @property
    def adapter_params(self) -> int:
        """Everything a bank stores except the router"""
        return self.main + self.delta + self.bias + self.sigma


class CostRow(BaseModel):
    """
    Model: One printed row of the overhead tables
    """

    model_config = {"strict": True, "frozen": True}

    rank: Annotated[int, Field(ge=1, description="Rank r of every expert")]
    depth: Annotated[int, Field(ge=1, description="Number of layers L")]
    d_final: Annotated[int, Field(ge=1, description="Final embedding width d_L")]
    main: Annotated[int, Field(ge=0)]
    delta: Annotated[int, Field(ge=0)]

    @property
    def ratio(self) -> float:
        return self.delta / self.main if self.main else 0.0


class RouterCostRow(BaseModel):
    """
    Model: Router work relative to expert propagation for one shape
    """

    model_config = {"strict": True, "frozen": True}

    rank: Annotated[int, Field(ge=1)]
    depth: Annotated[int, Field(ge=1)]
    router_flops: Annotated[int, Field(ge=0)]
    expert_flops: Annotated[int, Field(ge=0)]

    @property
    def ratio(self) -> float:
        return self.router_flops / self.expert_flops if self.expert_flops else 0.0


class CheckResult(BaseModel):
    """
    Model: One verification check with its measured value
    """

    model_config = {"strict": True}

    name: Annotated[str, Field(min_length=1, description="What was checked")]
    measured: Annotated[str, Field(description="Measured value as printed")]
    passed: Annotated[bool, Field(description="Whether the check holds")]
    tolerance: Annotated[
        float | None, Field(None, ge=0.0, description="Tolerance, None for exact checks")
    ] = None
    detail: Annotated[str | None, Field(None, description="Extra context")] = None

    def line(self) -> str:
        """'name: measured PASS' as written to verify.txt"""
        verdict = "PASS" if self.passed else "FAIL"
        return f"{self.name}: {self.measured} {verdict}"


class VerifyReport(BaseModel):
    """
    Model: Results of one verification suite
    """

    model_config = {"strict": True}

    suite: Annotated[str, Field(min_length=1)]
    checks: Annotated[list[CheckResult], Field(default_factory=list)]

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failures(self) -> list[CheckResult]:
        return [check for check in self.checks if not check.passed]
