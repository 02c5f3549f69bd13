"""Shared test utilities that do call into the package (unlike ``oracles``)."""
import hashlib
import json
import os
import time

import numpy as np
import pytest

from sortconv import build_sample_plan, build_sort_plan
from sortconv.dataset import load_mnist, rotate_images, split_train_valid
from sortconv.models import build_model, load_model
from sortconv.reports import RunReport
from sortconv.sorter import expand_array
from sortconv.trainer import TrainConfig, evaluate_shards, train


def plans(n, sampling, sorting, phase=0.0):
    sp = build_sample_plan(n, sampling, phase)
    return sp, build_sort_plan(sp, sorting)


def order_stable(x, sp, so, step):
    """True if every +-step perturbation of one entry keeps the sort permutation.

    Central differences are only valid where the sort is locally constant, so
    this checks exactly the inputs the finite-difference loop will visit.
    """
    base = expand_array(x, sp, so)[1].source
    for idx in np.ndindex(x.shape):
        for d in (step, -step):
            y = x.copy()
            y[idx] += d
            if not np.array_equal(expand_array(y, sp, so)[1].source, base):
                return False
    return True


def draw_stable_input(rng, shape, sp, so, step=1e-5, attempts=200):
    """Uniform(0.1, 1) input whose sort order survives every FD perturbation."""
    for _ in range(attempts):
        x = rng.uniform(0.1, 1.0, size=shape)
        if order_stable(x, sp, so, step):
            return x
    pytest.fail("could not draw an input with a locally constant sort")


# desk-scale training protocol shared by the slow acceptance criteria -------

DESK_ANGLES = tuple(range(0, 360, 30))
DESK_PROTOCOL = dict(train_images=10_000, valid_images=1_000, test_images=1_000,
                     split_seed=0, model_seed=0, dtype="float32",
                     epochs=15, batch_size=100, lr0=1e-3, lr_decay=0.8, decay_every=10,
                     seed=0)


def acceptance_cache_dir():
    """Where trained desk-scale checkpoints are kept between test sessions."""
    path = os.environ.get("SORTCONV_ACCEPTANCE_CACHE",
                          os.path.join(os.path.expanduser("~"), ".cache", "sortconv",
                                       "acceptance"))
    os.makedirs(path, exist_ok=True)
    return path


def desk_split(mnist):
    """``(train, valid, test)`` image/label pairs of the desk protocol."""
    p = DESK_PROTOCOL
    X, y = load_mnist(mnist, "train")
    (xt, yt), (xv, yv) = split_train_valid(X, y, 10_000, seed=p["split_seed"])
    Xs, ys = load_mnist(mnist, "test")
    return ((xt[:p["train_images"]], yt[:p["train_images"]]),
            (xv[:p["valid_images"]], yv[:p["valid_images"]]),
            (Xs[:p["test_images"]], ys[:p["test_images"]]))


def desk_report(variant, mnist):
    """Train (or reuse a cached) ``variant`` under the desk protocol and
    evaluate it per angle. Returns ``(RunReport, info dict)``.

    The cache key hashes the full protocol, so changing any setting retrains.
    Set ``SORTCONV_ACCEPTANCE_RETRAIN=1`` to ignore cached checkpoints.
    """
    p = DESK_PROTOCOL
    key = hashlib.sha256(json.dumps(dict(p, variant=variant), sort_keys=True).encode())
    stem = os.path.join(acceptance_cache_dir(), f"{variant}-{key.hexdigest()[:12]}")
    train_data, valid_data, test_data = desk_split(mnist)
    retrain = os.environ.get("SORTCONV_ACCEPTANCE_RETRAIN") == "1"
    if retrain or not os.path.exists(stem + ".ckpt"):
        model = build_model(variant, seed=p["model_seed"], dtype=p["dtype"])
        config = TrainConfig(epochs=p["epochs"], batch_size=p["batch_size"], lr0=p["lr0"],
                             lr_decay=p["lr_decay"], decay_every=p["decay_every"],
                             seed=p["seed"])
        start = time.perf_counter()
        result = train(model, train_data, valid_data, config)
        seconds = time.perf_counter() - start
        model.load_state_dict(result.best_state)
        model.save(stem + ".ckpt", epoch=result.best_epoch, protocol=p,
                   valid_accuracy=result.best_valid_accuracy, train_seconds=seconds)
        result.write_history(stem + "_history.csv")
    model, meta = load_model(stem + ".ckpt")
    start = time.perf_counter()
    shards = [(rotate_images(test_data[0], a), test_data[1]) for a in DESK_ANGLES]
    results = evaluate_shards(model, shards)
    report = RunReport(variant, list(DESK_ANGLES), [int(c.sum()) for _, c, _ in results],
                       [int(t.sum()) for _, _, t in results], config=dict(p), seed=p["seed"],
                       seconds=time.perf_counter() - start)
    report.write(stem + "_rot")
    info = {"train_seconds": meta.get("train_seconds"), "best_epoch": meta.get("epoch"),
            "valid_accuracy": meta.get("valid_accuracy"), "report": stem + "_rot.csv"}
    return report, info
