# coding: utf-8

# # Training a small network in 8-bit log arithmetic
#
# Weights live in a 16-bit log store and are updated multiplicatively; the
# forward and backward passes see 8-bit log values.  A float network trained
# with plain SGD is the reference.

from lnskit.config import ExperimentConfig
from lnskit.harness import cmd_qu_bitwidth_sweep, cmd_train

cfg = ExperimentConfig.from_dict({"training": {"steps": 1000, "eval_every": 250}})
rep = cmd_train(cfg, threads=2)
for h in rep.history:
    print(f"step {h['step']:5d}  loss {h['loss']:.4f}  accuracy {h['accuracy']:.3f}")
print("float baseline:", rep.results["baseline"]["accuracy"], " log:", rep.final["accuracy"])
print("counters:", rep.counters)

# Narrowing the weight store hurts additive updates more than multiplicative
# ones: a small additive step often rounds away entirely on a coarse log grid.

sweep = ExperimentConfig.from_dict({
    "task": "qu-bitwidth-sweep",
    "sweep": {"qu_bitwidths": [16, 12, 10], "qu_steps": 1000},
})
rep = cmd_qu_bitwidth_sweep(sweep, threads=4)
for algo, row in rep.results["accuracy"].items():
    print(algo, row)
print("accuracy drop at the narrowest store:", rep.results["degradation"])
