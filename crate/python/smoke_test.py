"""Load the compiled extension and exercise each binding.

Build first:  cargo build -p expharness-py --features extension-module
"""
import importlib.machinery
import importlib.util
import json
import os
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

MANIFEST = """
name = "smoke"
research_question = "Does the binding load?"
metric_names = ["val_loss"]

[[tiers]]
tier = 1
command = "true"
"""


def load():
    so = os.path.join(ROOT, "target", "debug", "libexpharness_py.so")
    if not os.path.exists(so):
        sys.exit(f"missing {so}; build the python crate first")
    loader = importlib.machinery.ExtensionFileLoader("expharness_py", so)
    spec = importlib.util.spec_from_loader("expharness_py", loader)
    mod = importlib.util.module_from_spec(spec)
    loader.exec_module(mod)
    return mod


def main():
    exh = load()

    eid, desc, metrics = exh.parse_commit("exp(E007): wider model -- val_loss=2.31")
    assert (eid, desc) == ("E007", "wider model"), (eid, desc)
    assert metrics == [("val_loss", 2.31)], metrics
    try:
        exh.parse_commit("fix typo")
    except ValueError:
        pass
    else:
        raise AssertionError("non-experiment commit accepted")

    assert isinstance(exh.validate_report("not a report"), list)
    assert exh.expand_nodelist("gpu[01-03]") == ["gpu01", "gpu02", "gpu03"]

    with tempfile.TemporaryDirectory() as tmp:
        log = os.path.join(tmp, "run.log")
        with open(log, "w") as f:
            f.write("".join(f"line {i}\n" for i in range(100)))
        assert exh.tail(log, 2) == "line 98\nline 99\n"

        ws = os.path.join(tmp, "ws")
        exe = os.path.join(ROOT, "target", "debug", "exh")
        if os.path.exists(exe):
            manifest = os.path.join(tmp, "project.toml")
            with open(manifest, "w") as f:
                f.write(MANIFEST)
            subprocess.run([exe, "init", "--manifest", manifest, ws], check=True, capture_output=True)
            state = json.loads(exh.bootstrap(ws))
            assert isinstance(state, dict)
            assert json.loads(exh.experiments(ws)) == []

    print("python smoke test ok")


if __name__ == "__main__":
    main()
