import pytest

from mifo.config import ExperimentConfig
from mifo.model import ModelConfig, TinyTransformer
from mifo.tasks import VOCAB, TaskConfig, make_questions


TINY_MODEL = {"vocab_size": 20, "n_layers": 1, "d_model": 8, "n_heads": 2, "max_seq_len": 32}
TINY_TASK = {"modulus": 5, "min_chain": 1, "max_chain": 2, "n_train": 12, "n_eval": 6}


def tiny_config_dict(tmp_path, **overrides):
    d = {
        "mode": "mifo",
        "epochs": 1,
        "output_dir": str(tmp_path / "run"),
        "eval_k": 2,
        "model": dict(TINY_MODEL),
        "task": dict(TINY_TASK),
        "grpo": {"rollouts_per_query": 2, "rollout_batch_size": 4, "update_batch_size": 2,
                 "learning_rate": 1e-3, "max_new": 12},
        "sft": {"p": 1.0, "rho": 0.5, "S": 2, "learning_rate": 1e-3, "batch_size": 2},
        "ledger": {"alpha": 0.5, "k": 0.5},
        "probes": {"prune_grid": [0.0, 0.5], "dr_contexts": 4, "learning_rate": 1e-3},
        "warmup": {"steps": 2, "batch_size": 2, "learning_rate": 3e-3, "max_chain": 1},
    }
    d.update(overrides)
    return d


@pytest.fixture
def tiny_config(tmp_path):
    return ExperimentConfig.from_dict(tiny_config_dict(tmp_path))


@pytest.fixture
def model():
    return TinyTransformer(ModelConfig(**TINY_MODEL), eos_id=VOCAB.eos)


@pytest.fixture
def params(model):
    return model.init()


@pytest.fixture
def task():
    return TaskConfig(**TINY_TASK)


@pytest.fixture
def questions(task):
    return make_questions(task, task.train_seeds)
