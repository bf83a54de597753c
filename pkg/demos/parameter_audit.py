"""Where the parameters live: per-stage counts and the standard-conv ratio.

Builds the default 36-in/16-out model, prints a per-block parameter
breakdown, and compares the total against a reference count for the same
U-Net shape built from standard 3x3 convolutions.
"""

from nimbus.model import ModelConfig, baseline_reference_param_count, build_model


def main():
    config = ModelConfig()
    model = build_model(config, seed=0)

    print(f"stage widths {config.stage_widths}, depth multiplier "
          f"{config.depth_multiplier}, attention reduction {config.cbam_reduction}")
    print()

    by_block = {}
    for name, arr in model.named_params():
        block = name.split(".", 1)[0]
        by_block[block] = by_block.get(block, 0) + arr.size
    total = sum(by_block.values())
    for block, count in by_block.items():
        bar = "#" * max(1, round(40 * count / max(by_block.values())))
        print(f"  {block:6s} {count:>9,}  {bar}")
    print(f"  {'total':6s} {total:>9,}")
    print()

    baseline = baseline_reference_param_count(config)
    print(f"same shape with standard 3x3 convolutions: {baseline:,} params")
    print(f"ratio {total / baseline:.4f} "
          f"({baseline / total:.1f}x fewer parameters)")

    toy = ModelConfig(in_channels=4, out_channels=2,
                      stage_widths=(8, 16, 32, 64, 128),
                      depth_multiplier=1, cbam_reduction=4)
    print(f"\ntoy config used by the gradient suite: "
          f"{build_model(toy, seed=0).count_params():,} params")


if __name__ == "__main__":
    main()
