"""Prefix-shuffle probe on a small trained toy transformer.

Trains an attention-only model on the window-majority task, shuffles the
first floor(pN) tokens of each evaluation sequence and reports how the
per-layer SVFlow metrics and the output log-perplexity move with the shuffle
rate r = floor(pN) / n.

    python3 demos/shuffle_probe.py
"""

from svflow.experiments.config import build_config
from svflow.experiments.runners import run_shuffle_probe


def main():
    cfg = build_config("shuffle", {}, ["steps=300", "shuffle_seeds=2"])
    res = run_shuffle_probe(cfg)
    s = res.summary
    print(f"model accuracy {s['model_accuracy']:.3f}")
    print("delta logPPL by r-bin (0,.25] (.25,.5] (.5,.75] (.75,1):")
    print("  " + "  ".join(f"{v:+.4f}" for v in s["delta_log_ppl"]))
    print("mean |delta -log p| per layer:")
    for i, v in enumerate(s["layer_abs_delta_neg_log_p"]):
        print(f"  layer {i}: {v:.5f}")
    print(f"deep {s['deep_abs_delta']:.5f} vs shallow {s['shallow_abs_delta']:.5f}")


if __name__ == "__main__":
    main()
