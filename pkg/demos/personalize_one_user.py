"""
Personalising one user's classifier head
========================================

Train a general model on five synthetic users, then stream 40% of the sixth
user's windows through the on-device update and score the remaining 60%.
Only the dense head moves; the backbone hash is checked before and after.
"""

import tempfile

import numpy as np

from odphar.adapt import AdaptState, adapt_session, place_model
from odphar.cost import builtin_profile, estimate_update
from odphar.data import L1PO, SplitPlan, make_split, normalize_split, window_dataset
from odphar.nn import Model
from odphar.synth import synth_drift_dataset
from odphar.train import TrainConfig, evaluate, train_general_model

tmp = tempfile.mkdtemp()
manifest = synth_drift_dataset(tmp, users=6, classes=4, drift=0.8, seed=0)
ws = window_dataset(manifest)
print(manifest.name, "->", len(ws), "windows of shape", ws.x.shape[1:])

# hold out user 2; everything else trains the general model
split = normalize_split(make_split(ws, SplitPlan(L1PO, 2, seed=0)))
print("train / adapt / test:", len(split.train), len(split.adapt), len(split.test))

model = train_general_model(split.train.x, split.train.y, manifest.classes, TrainConfig(epochs=10))
print("final training loss %.4f" % model.metadata["final_loss"])

pre = evaluate(model, split.test.x, split.test.y)
print("pre-ODP  accuracy on the unseen user: %.2f%%" % (100 * pre.accuracy))

# does the head (weights, EMA buffers, scratch) fit the 128 KB L1?
print(place_model(model, strict=False).to_dict())

state = AdaptState.from_classifier(model.classifier)
report = adapt_session(state, model.backbone, zip(split.adapt.x, split.adapt.y))
print("steps", report.steps, "faults", report.faults, "backbone unchanged:", report.backbone_unchanged)
print("first / last streamed losses: %.3f / %.3f" % (np.mean(report.losses[:10]), np.mean(report.losses[-10:])))

post = evaluate(Model(model.backbone, state.classifier), split.test.x, split.test.y)
print("post-ODP accuracy: %.2f%% (%+.2f points)" % (100 * post.accuracy, 100 * (post.accuracy - pre.accuracy)))

# what that session would cost on the GAP9 profile
e = estimate_update(builtin_profile("gap9"), state.classifier)
print("per update %.3f ms / %.2f uJ, whole session %.1f ms / %.1f uJ"
      % (e.latency_s * 1e3, e.energy_j * 1e6, e.latency_s * 1e3 * report.steps, e.energy_j * 1e6 * report.steps))
