import csv
import json
import sys
from pathlib import Path

from deepdiff import DeepDiff

ARTIFACT_SUFFIXES = {".json", ".csv"}


def load_artifact(path):
    if path.suffix == ".json":
        return json.loads(path.read_text())
    with open(path, newline="") as f:
        return list(csv.reader(f))


def collect_artifacts(run_dir):
    root = Path(run_dir)
    return {
        str(path.relative_to(root)): path
        for path in sorted(root.rglob("*"))
        if path.is_file() and path.suffix in ARTIFACT_SUFFIXES
    }


def compare_runs(old_dir, new_dir, verbose=False):
    old = collect_artifacts(old_dir)
    new = collect_artifacts(new_dir)

    added_files = set()
    removed_files = set()
    changed_files = []

    for name in sorted(set(old.keys()) | set(new.keys())):
        if name not in old:
            added_files.add(name)
            print(f"+ NEW FILE: {name}")
        elif name not in new:
            removed_files.add(name)
            print(f"- REMOVED FILE: {name}")
        else:
            old_doc = load_artifact(old[name])
            new_doc = load_artifact(new[name])

            # Byte level checks catch float formatting drift DeepDiff would not
            bytes_changed = old[name].read_bytes() != new[name].read_bytes()
            diff = DeepDiff(old_doc, new_doc, ignore_order=False)

            if diff or bytes_changed:
                changed_files.append(name)
                print(f"\n{'=' * 60}")
                print(f"CHANGED: {name}")
                print(f"{'=' * 60}")
                if diff:
                    print(diff.pretty() if verbose else f"{len(diff.affected_paths)} values differ")
                else:
                    print("Same values, different bytes")

    print(f"\n{'=' * 60}")
    print("SUMMARY")
    print(f"{'=' * 60}")
    print(f"Files added: {len(added_files)}")
    print(f"Files removed: {len(removed_files)}")
    print(f"Files changed: {len(changed_files)}")

    if changed_files:
        print(f"\nChanged files: {', '.join(changed_files)}")
    return not (added_files or removed_files or changed_files)


if __name__ == "__main__":
    if len(sys.argv) < 3:
        print("Usage: python compare_runs.py <old_run_dir> <new_run_dir> [--verbose]")
        sys.exit(1)

    verbose = "--verbose" in sys.argv
    identical = compare_runs(sys.argv[1], sys.argv[2], verbose=verbose)
    sys.exit(0 if identical else 1)
