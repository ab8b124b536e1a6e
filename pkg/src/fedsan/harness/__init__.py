from .config import RunConfig, load_config, config_text, set_dotted
from .experiment import run_experiment, measure_cost, CostRecord
from .report import emit_report, emit_scaling

__all__ = ["RunConfig", "load_config", "config_text", "set_dotted",
           "run_experiment", "measure_cost", "CostRecord",
           "emit_report", "emit_scaling"]
