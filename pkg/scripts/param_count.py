"""Parameter counts per component for each preset and fusion mode."""
import argparse

from banet.config import FUSION_MODES, PRESETS
from banet.model import BANet

RESTLITE_PARAMS = 10.49e6
COMPONENTS = ("backbone.", "texture.", "fam.", "fusion.", "head.")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--presets", nargs="*", default=list(PRESETS))
    args = ap.parse_args()
    print(f"{'preset':<6} {'mode':<5} {'total':>10} " + " ".join(f"{c.rstrip('.'):>10}" for c in COMPONENTS))
    for name in args.presets:
        for mode in FUSION_MODES:
            model = BANet.initialize(PRESETS[name].replace(fusion={"fusion_mode": mode}))
            parts = " ".join(f"{model.parameter_count(c):>10}" for c in COMPONENTS)
            print(f"{name:<6} {mode:<5} {model.parameter_count():>10} {parts}")
    lite = BANet.initialize(PRESETS["lite"]).parameter_count("backbone.")
    print(f"\nlite backbone {lite} vs reference {RESTLITE_PARAMS:.0f}: "
          f"{100 * (lite - RESTLITE_PARAMS) / RESTLITE_PARAMS:+.2f}%")


if __name__ == "__main__":
    main()
