"""End-to-end experiment through the command-line driver.

Runs every stage of the bundled sech1d configuration into a scratch directory
and prints the report. The free soliton has no internal mode, so the
arithmetic hypotheses fail there by design; the well1d configuration is the
full decay scenario and takes several minutes.
"""
import sys
import tempfile
from pathlib import Path

from soliton_lab.cli import main

config = sys.argv[1] if len(sys.argv) > 1 else "sech1d"
with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp) / config
    code = main(["pipeline", "--config", config, "--out-dir", str(out)])
    print(f"pipeline exit status {code}\n")
    print((out / "report.txt").read_text())
    print("artifacts:", ", ".join(sorted(str(p.relative_to(out)) for p in out.rglob("*.csv"))))
