"""
User-induced drift: leave-one-person-out against leave-one-session-out
=======================================================================

The same synthetic population is generated with and without per-user
transforms. Under L1PO the target user is never seen in training, under L1SO
their other session is, so the difference of the pre-adaptation accuracies
isolates the drift that comes from the user. A couple of minutes on one core.
"""

import tempfile

from odphar.harness import ExperimentConfig, quantify_drift, run_l1po, run_l1so, summarize
from odphar.synth import synth_drift_dataset
from odphar.train import TrainConfig

cfg = ExperimentConfig(train=TrainConfig(epochs=10))

for magnitude in (0.0, 0.8):
    m = synth_drift_dataset(tempfile.mkdtemp(), users=6, classes=4, drift=magnitude, seed=0)
    l1po, l1so = run_l1po(m, cfg), run_l1so(m, cfg)
    drift = quantify_drift(l1po, l1so)
    print(summarize([l1po, l1so], drift))
    # per-user view: who is hardest to generalise to
    for user, d in sorted(drift["per_user"].items(), key=lambda kv: -kv[1]):
        print("  user %s  %+.2f points" % (user, 100 * d))
    print()
