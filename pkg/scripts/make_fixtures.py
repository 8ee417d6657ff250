"""Write the fixture set to a directory (default: ./fixtures)."""
import argparse

from hoadapt.fixtures import generate_fixtures


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", nargs="?", default="fixtures")
    ap.add_argument("--scale", type=float, default=1.0, help="metric size-normalization factor")
    args = ap.parse_args()
    manifest = generate_fixtures(args.out, scale=args.scale)
    for group, entries in manifest["files"].items():
        for name, info in entries.items():
            extra = f" nodes={info['nodes']} elements={info['elements']}" if "nodes" in info else ""
            print(f"{group:8s} {info['file']}{extra}")


if __name__ == "__main__":
    main()
