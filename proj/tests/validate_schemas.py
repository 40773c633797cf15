"""Runs each lmed command on shipped inputs and validates the JSON against schemas/."""
import json
import subprocess
import sys
from pathlib import Path

import jsonschema

cli, root = sys.argv[1], Path(sys.argv[2])
schemas = {p.stem.replace(".schema", ""): json.loads(p.read_text()) for p in (root / "schemas").glob("*.json")}
fixtures = root / "data" / "fixtures"
specs = root / "data" / "specs"

runs = [
    ("estimate_report", ["estimate", "--data", fixtures / "tau1_n200.csv", "--schema", fixtures / "tau1_n200.schema.json",
                         "--a-prime", "1", "--a-star", "0", "--contrasts"], 0),
    ("estimate_report", ["estimate", "--data", fixtures / "tau1_n200.csv", "--schema", fixtures / "tau1_n200.schema.json",
                         "--a-prime", "1", "--a-star", "0", "--folds", "1"], 0),
    ("mc_report", ["simulate", "--spec", specs / "tau1_binary.json", "--a-prime", "1", "--a-star", "0", "--n", "100,200",
                   "--reps", "2", "--scenarios", "all-correct,g-misspecified"], 0),
    ("oracle_report", ["oracle", "--spec", specs / "tau2_binary.json", "--a-prime", "1,1", "--a-star", "0,0"], 0),
    ("oracle_report", ["oracle", "--spec", specs / "positivity_violation.json", "--a-prime", "1", "--a-star", "0"], 0),
    ("oracle_report", ["oracle", "--spec", specs / "degenerate_mediator.json", "--a-prime", "1", "--a-star", "0"], 0),
    ("error", ["estimate", "--data", fixtures / "tau1_nonmonotone.csv", "--schema", fixtures / "tau1_n200.schema.json",
               "--a-prime", "1", "--a-star", "0"], 2),
]

failed = 0
for schema, args, code in runs:
    proc = subprocess.run([cli] + [str(a) for a in args], capture_output=True, text=True)
    label = " ".join(str(a) for a in args[:1]) + f" -> {schema}"
    if proc.returncode != code:
        print(f"FAIL {label}: exit {proc.returncode}, expected {code}\n{proc.stderr}")
        failed += 1
        continue
    text = proc.stdout if code == 0 else proc.stderr
    try:
        jsonschema.validate(json.loads(text), schemas[schema])
        print(f"ok   {label}")
    except (jsonschema.ValidationError, json.JSONDecodeError) as e:
        print(f"FAIL {label}: {e}")
        failed += 1
sys.exit(1 if failed else 0)
