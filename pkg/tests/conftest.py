import hashlib
import json
import shutil
import time
from pathlib import Path

import pytest
import torch

from zsvoice.audio import SpectrogramFrontEnd
from zsvoice.config import preset
from zsvoice.data import BatchSampler, SpeechDataset, Vocabulary, load_manifest
from zsvoice.model import build_models
from zsvoice.toyset import make_toy_corpus
from zsvoice.training import init_state, load_checkpoint, run_training, save_checkpoint

SRC = Path(__file__).resolve().parents[1] / "src" / "zsvoice"
TOY_STEPS = 2000


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    make_toy_corpus(out)
    return out


@pytest.fixture(scope="session")
def toy_manifest(toy_dir):
    return load_manifest(toy_dir / "train.txt")


@pytest.fixture(scope="session")
def toy_vocab(toy_dir):
    return Vocabulary.load(toy_dir / "vocab.txt")


@pytest.fixture(scope="session")
def toy_cfg():
    return preset("toy")


@pytest.fixture(scope="session")
def toy_dataset(toy_manifest, toy_vocab, toy_cfg):
    return SpeechDataset(toy_manifest, toy_vocab, SpectrogramFrontEnd.from_config(toy_cfg),
                         min_frames=toy_cfg.segment_frames)


@pytest.fixture
def toy_batch(toy_dataset, toy_cfg):
    sampler = BatchSampler(toy_dataset, toy_cfg.batch_size, toy_cfg.seed)
    gt, refs = sampler.epoch_plan(0)[0]
    return toy_dataset.collate(gt, refs)


@pytest.fixture
def small_models(toy_cfg):
    torch.manual_seed(0)
    return build_models(toy_cfg, 8)


def _code_fingerprint() -> str:
    h = hashlib.sha256()
    for path in sorted(SRC.glob("*.py")):
        h.update(path.read_bytes())
    h.update(str(TOY_STEPS).encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def trained_toy(request, toy_dataset, toy_vocab, toy_cfg):
    """Toy model trained for 2000 steps; cached in .pytest_cache keyed by source hash."""
    cache = Path(request.config.cache.mkdir("zsvoice-toy"))
    key = _code_fingerprint()
    ckpt = cache / f"{key}.pt"
    metrics = cache / f"{key}.metrics.jsonl"
    meta = cache / f"{key}.json"
    if not (ckpt.exists() and metrics.exists() and meta.exists()):
        for stale in cache.glob("*"):
            stale.unlink() if stale.is_file() else shutil.rmtree(stale)
        state = init_state(toy_cfg, toy_vocab)
        sampler = BatchSampler(toy_dataset, toy_cfg.batch_size, toy_cfg.seed)
        start = time.perf_counter()
        run_training(state, sampler, TOY_STEPS, metrics_path=metrics)
        elapsed = time.perf_counter() - start
        save_checkpoint(state, ckpt)
        meta.write_text(json.dumps({"train_seconds": elapsed}))
    state = load_checkpoint(ckpt, restore_rng=False)
    state.model.eval()
    reports = [json.loads(line) for line in metrics.read_text().splitlines()]
    return {
        "model": state.model,
        "vocab": state.vocab,
        "reports": reports,
        "train_seconds": json.loads(meta.read_text())["train_seconds"],
        "checkpoint": ckpt,
    }


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if report.passed else "FAIL"
    previous = item.config._criteria.get(number)
    if previous is None:
        item.config._criteria[number] = (title, status, detail)
        return
    details = "; ".join(d for d in (previous[2], detail) if d)
    if status == "FAIL" and previous[1] == "PASS":
        item.config._criteria[number] = (title, status, details)
    else:
        item.config._criteria[number] = (previous[0], previous[1], details)


def pytest_terminal_summary(terminalreporter, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(criteria):
        title, status, detail = criteria[number]
        line = f"criterion {number:2d} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
