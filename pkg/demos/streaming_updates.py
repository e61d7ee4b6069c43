"""
One sample at a time
====================

The update path as a device would run it: a sample arrives, the frozen
backbone produces features, the head takes one EMA-momentum step, and the
state can be checkpointed and resumed between samples.
"""

import tempfile
from pathlib import Path

import numpy as np

from odphar.adapt import AdaptState, adapt_step
from odphar.data import L1PO, SplitPlan, make_split, normalize_split, window_dataset
from odphar.nn import Model
from odphar.synth import synth_drift_dataset
from odphar.train import TrainConfig, evaluate, train_general_model

tmp = Path(tempfile.mkdtemp())
m = synth_drift_dataset(tmp / "data", users=6, classes=4, drift=0.8, seed=0)
split = normalize_split(make_split(window_dataset(m), SplitPlan(L1PO, 2, seed=0)))
model = train_general_model(split.train.x, split.train.y, m.classes, TrainConfig(epochs=8))
frozen = model.backbone.freeze()

state = AdaptState.from_classifier(model.classifier)
acc = [evaluate(model, split.test.x, split.test.y).accuracy]
half = len(split.adapt) // 2
for i, (x, y) in enumerate(zip(split.adapt.x, split.adapt.y)):
    loss, state = adapt_step(state, frozen, x, int(y))
    acc.append(evaluate(Model(frozen, state.classifier), split.test.x, split.test.y).accuracy)
    if i + 1 == half:
        # power cycle: persist, reload, carry on
        state.save(tmp / "head.odfs")
        state = AdaptState.load(tmp / "head.odfs")
        print("checkpointed after %d steps" % state.step_count)

acc = np.array(acc)
print("test accuracy after 0, 25%, 50%, 75%, 100% of the stream:")
print(np.round(100 * acc[np.linspace(0, len(acc) - 1, 5).astype(int)], 2))
