import enum


class Scenario(str, enum.Enum):
    """Which sparsity sources the node exploits."""

    DC = "dc"
    IN = "in"
    IN_OUT = "in_out"
    IN_OUT_WR = "in_out_wr"

    @property
    def uses_input(self):
        return self is not Scenario.DC

    @property
    def uses_output(self):
        return self in (Scenario.IN_OUT, Scenario.IN_OUT_WR)

    @property
    def uses_wdu(self):
        return self is Scenario.IN_OUT_WR


class Pass(str, enum.Enum):
    FP = "fp"
    BP = "bp"
    WG = "wg"


SCENARIO_ORDER = (Scenario.DC, Scenario.IN, Scenario.IN_OUT, Scenario.IN_OUT_WR)
PASS_ORDER = (Pass.FP, Pass.BP, Pass.WG)
