import numpy as np
import pytest
import torch

torch.set_flush_denormal(True)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def point_mass_denoiser(mu_star, schedule):
    """Exact eps-prediction for data concentrated at ``mu_star``."""
    def denoiser(x_t, t, p, s, mask=None, s_mask=None):
        ab = torch.tensor(schedule.alpha_bars, dtype=x_t.dtype)[t - 1].view(-1, *[1] * (x_t.ndim - 1))
        return (x_t - ab.sqrt() * mu_star) / (1 - ab).sqrt()
    return denoiser


# ---------------------------------------------------------------- pipeline fixtures

def micro_config(**train):
    """Tiny networks and short chains: exercises the plumbing in seconds."""
    from diffspeech.config import merge, from_dict
    from diffspeech.toy import toy_config

    base = toy_config().to_dict()
    tiny = {"n_layers": 2, "n_blocks": 1, "channels": 8}
    over = {
        "schedule": {"duration_steps": 3, "semantic_steps": 4, "acoustic_steps": 4, "wave_steps": 3},
        "denoisers": {k: tiny for k in ("duration", "semantic", "acoustic", "wave")},
        "train": {"ctap_steps": 4, "duration_steps": 3, "semantic_steps": 3, "acoustic_steps": 3,
                  "wave_steps": 3, "batch_size": 4, **train},
    }
    return from_dict(merge(base, over))


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """10 utterances, 2 labeled, written once per session."""
    from diffspeech.toy import make_toy_corpus

    out = tmp_path_factory.mktemp("toy10")
    records, symbols = make_toy_corpus(out, n_utterances=10, n_labeled=2, phonemes_range=(8, 12),
                                       duration_range=(5, 12))
    return out, records, symbols


@pytest.fixture(scope="session")
def micro_run(toy_corpus):
    from diffspeech.data import FeatureStore
    from diffspeech.pipeline import train_ctap, train_semantic_to_speech, train_text_to_semantic

    _, records, _ = toy_corpus
    cfg = micro_config()
    store = FeatureStore()
    ctap = train_ctap(records, store, cfg)
    ckpts = {"ctap": ctap, **train_text_to_semantic(records, store, cfg, ctap),
             **train_semantic_to_speech(records, store, cfg, ctap)}
    return cfg, store, records, ckpts


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
