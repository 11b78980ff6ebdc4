# Parameters, FLOPs and throughput across ablation variants
# ----------------------------------------------------------
# count_flops runs one forward pass with an op-level tally active (one
# multiply-accumulate = 2 FLOPs); measure_throughput times warm forward
# passes. Three variants are compared: the full model, "no_sfb" (plain
# concatenation skips) and "no_trans" (bottleneck transformer replaced by
# one convolutional block).
#
# This demo uses a reduced 96x96 geometry so it finishes in seconds; the
# full 224x224 profile is exercised by `sfbnet bench --config
# configs/full.json` and by tests/test_acceptance.py (where the measured
# cost ratios are also compared against their reference bands).

from sfbnet.model import ModelConfig, build_model, count_flops, count_parameters, measure_throughput

config = ModelConfig(input_hw=(96, 96), classes=4, base_channels=16,
                     window=4, sfb_heads=(2, 4, 8), bottleneck_heads=16, seed=0)

print(f"{'variant':>10} {'params':>12} {'Gflops':>9} {'images/s':>9}")
rows = {}
for variant in ("full", "no_sfb", "no_trans"):
    model = build_model(config.variant(variant))
    params = count_parameters(model)
    gflops = count_flops(model) / 1e9
    ips, batch = measure_throughput(model, repeats=3, batch=2, warmup=1)
    rows[variant] = (params, gflops, ips)
    print(f"{variant:>10} {params:>12,} {gflops:>9.2f} {ips:>9.2f}")

full_p, full_f, full_i = rows["full"]
print("\nrelative to the full model:")
for variant in ("no_sfb", "no_trans"):
    p, f, i = rows[variant]
    print(f"{variant:>10}: params x{p / full_p:.3f}  flops x{f / full_f:.3f}  "
          f"speed x{i / full_i:.2f}")
