"""Validates an experiment report against docs/report.schema.json."""
import json
import sys

import jsonschema


def main() -> int:
    schema_path, report_path = sys.argv[1], sys.argv[2]
    with open(schema_path) as f:
        schema = json.load(f)
    with open(report_path) as f:
        report = json.load(f)
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(report), key=lambda e: list(e.path))
    for e in errors:
        print(f"{'/'.join(map(str, e.path)) or '<root>'}: {e.message}")
    if errors:
        return 1
    print(f"{report_path}: valid ({len(report['tasks'])} tasks, {len(report['traces'])} traces)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
