"""DeepONet virtual sensor for elbow-pipe thermal-hydraulic fields."""

__version__ = "0.1.0"

PARAM_ORDER = ("P", "V_o", "k")
