"""Deterministic scalar "training" script used as the test fixture.

Marker comments (``# @prefix`` and friends) are where tests splice in
hindsight logging statements. Busy-work per segment comes from the
FIXTURE_BUSY environment variable (JSON, seconds); execution counters go to
the file named by FIXTURE_COUNTERS.
"""

import atexit
import json
import os
import random
import time

import flor

BUSY = json.loads(os.environ.get("FIXTURE_BUSY") or "{}")
COUNTERS = {"prefix": 0, "train": 0, "validation": 0, "suffix": 0}


def spin(segment):
    end = time.perf_counter() + float(BUSY.get(segment, 0.0))
    while time.perf_counter() < end:
        pass


def dump_counters():
    path = os.environ.get("FIXTURE_COUNTERS")
    if path:
        with open(path, "w") as f:
            json.dump(COUNTERS, f)


atexit.register(dump_counters)


class Model:
    def __init__(self):
        self.w = 0.0
        self.b = 0.0

    def state_dict(self):
        return {"w": self.w, "b": self.b}

    def load_state_dict(self, state):
        self.w = state["w"]
        self.b = state["b"]


seed = flor.arg("seed", 81)
lr = flor.arg("lr", 0.05)
epochs = flor.arg("epochs", 5)
steps = flor.arg("steps", 50)

rng = random.Random(seed)
model = Model()
COUNTERS["prefix"] += 1
# @prefix
spin("prefix")

with flor.checkpointing(model=model, rng=rng):
    for epoch in flor.loop("epoch", range(epochs)):
        for step in flor.loop("step", range(steps)):
            COUNTERS["train"] += 1
            x = rng.random()
            y = 0.7 * x + 0.1 + rng.gauss(0, 0.01)
            err = model.w * x + model.b - y
            grad = 2 * err * x
            model.w -= lr * grad
            model.b -= lr * 2 * err
            flor.log("loss", err * err)
            # @step
            spin("step")
        COUNTERS["validation"] += 1
        val_err = abs(model.w - 0.7) + abs(model.b - 0.1)
        flor.log("val_err", val_err)
        # @validation
        spin("validation")

COUNTERS["suffix"] += 1
score = 1.0 / (1.0 + abs(model.w - 0.7))
flor.log("score", score)
# @suffix
spin("suffix")
