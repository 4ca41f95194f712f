# SPDX-License-Identifier: Apache-2.0
import os
import pathlib
import subprocess

import pytest

REPO_ROOT = pathlib.Path(__file__).resolve().parents[2]


@pytest.fixture(scope="session")
def cli():
    """Path to the `moe` binary (override with the MOE_CLI env var)."""
    path = pathlib.Path(os.environ.get("MOE_CLI", REPO_ROOT / "build" / "moe"))
    if not path.exists():
        pytest.fail(f"moe CLI not found at {path}; build it or set MOE_CLI")
    return str(path)


@pytest.fixture(scope="session")
def run():
    def _run(args, env=None, check=None):
        full_env = dict(os.environ)
        if env:
            full_env.update(env)
        proc = subprocess.run(
            args, capture_output=True, text=True, env=full_env, timeout=600
        )
        if check is not None:
            assert proc.returncode == check, (
                f"{args} exited {proc.returncode}, wanted {check}\n"
                f"stdout:\n{proc.stdout}\nstderr:\n{proc.stderr}"
            )
        return proc

    return _run
