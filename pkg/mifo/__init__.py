__version__ = "0.1.0"

from mifo.config import ExperimentConfig  # noqa: F401
from mifo.experiment import MifoRun, evaluate, run  # noqa: F401
from mifo.probe_runner import probe_command  # noqa: F401
