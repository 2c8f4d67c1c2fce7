"""Train S+T and SLA on one shifted task and look at what the adapted labels do.

    python3 demos/01_label_adaptation.py [--seed 0]
"""
import argparse

import numpy as np

from slalab.analysis import adapted_label_summary, center_audit, evaluate
from slalab.data import DomainSpec, generate_task, source_only_error
from slalab.nnet import forward_features
from slalab.sla import adapt_label, protonet_predict
from slalab.trainer import config_for_mode, train, train_oracle

ap = argparse.ArgumentParser()
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

task = generate_task(DomainSpec(), 3, args.seed)
print(f"task: {len(task.source_y)} source, {len(task.labeled_y)} labeled target, "
      f"{len(task.unlabeled_x)} unlabeled target")
print(f"source-only classifier error on target: {source_only_error(task):.3f}")

st = train(task, config_for_mode("st", seed=args.seed))
sla = train(task, config_for_mode("sla", seed=args.seed, warmup=500))
print(f"\nS+T test accuracy {st.final['test_acc']:.3f}")
print(f"SLA test accuracy {sla.final['test_acc']:.3f} "
      f"({len(sla.refresh_events)} center refreshes)")

# how good is the pseudo-center protonet as a target-view classifier?
feats = forward_features(sla.model, task.test_x)
ppc_acc = np.mean(np.argmax(protonet_predict(sla.ppc, feats), axis=1) == task.test_y)
print(f"protonet over pseudo centers, test accuracy {ppc_acc:.3f}")

# source points the pseudo-center protonet puts in another class
wrong = np.flatnonzero(np.argmax(protonet_predict(sla.ppc, forward_features(
    sla.model, task.source_x)), axis=1) != task.source_y)[:3]
np.set_printoptions(precision=3, suppress=True)
for i in wrong:
    y = np.eye(task.n_classes)[task.source_y[i]]
    p = protonet_predict(sla.ppc, forward_features(sla.model, task.source_x[i]))
    print(f"\nsource #{i} class {task.source_y[i]}")
    print("  one-hot   ", y)
    print("  protonet  ", p)
    print("  adapted   ", adapt_label(y, p, 0.3))

# the unlabeled pseudo centers should sit nearer the true target centers
# than the three labeled shots do
audit = center_audit(st.model, task)
print(f"\ncenter distance after S+T: labeled {audit.mean_labeled:.3f}, "
      f"pseudo {audit.mean_pseudo:.3f}")

oracle = train_oracle(task, config_for_mode("st", seed=args.seed))
summ = adapted_label_summary(sla.model, task, sla.ppc, oracle, 0.3)
print(f"classes whose mean adapted label is closer to the oracle than one-hot: "
      f"{summ.fraction_closer():.0%}")

acc, cm = evaluate(sla.model, task.test_x, task.test_y)
print(f"\nSLA confusion (rows true, cols predicted), worst class {cm.worst_row()}")
print(cm.counts)
