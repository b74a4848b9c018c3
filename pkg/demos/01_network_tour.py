"""A walk through the network: sizes, parameter budget, and what the second pass adds."""

import numpy as np

from lmbisnet.model import NetworkConfig, build_network, count_parameters, forward, parameter_table, zero_reverse_projections

model = build_network(NetworkConfig())
print("parameters:", count_parameters(model))

# largest layers first
for name, n in sorted(parameter_table(model), key=lambda t: -t[1])[:6]:
    print(f"  {name:<20}{n:>8}")

# ablations, smallest to largest
for label, cfg in [("plain U", NetworkConfig(multipath=False, pass_count=1)),
                   ("+ reverse skips", NetworkConfig(multipath=False)),
                   ("+ multipath", NetworkConfig(pass_count=1)),
                   ("full", NetworkConfig())]:
    print(f"{label:<16}{count_parameters(build_network(cfg)):>8}")

x = np.random.default_rng(0).random((1, 3, 64, 64)).astype(np.float32)
prob = forward(model, x)
print("output", prob.shape, "channel sums in", prob.sum(1).min(), prob.sum(1).max())

# with the reverse projections zeroed, the second pass reproduces the first
zero_reverse_projections(model)
print("zeroed reverse skips, pass 2 == pass 1:",
      np.array_equal(forward(model, x, pass_count=1), forward(model, x, pass_count=2)))
