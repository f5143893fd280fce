"""PEP 517 backend: setuptools configured from pyproject.toml only.

``setup.py`` in this repository is an interactive bootstrap script (it creates
a virtual environment and runs the tests), not a setuptools configuration, so
it must not be executed during a build.
"""

from setuptools import build_meta as _orig
from setuptools.build_meta import *  # noqa: F401,F403


class _Backend(_orig._BuildMetaBackend):
    def run_setup(self, setup_script="setup.py"):
        super().run_setup(setup_script="_build_backend/_setup_stub.py")


_backend = _Backend()
get_requires_for_build_wheel = _backend.get_requires_for_build_wheel
get_requires_for_build_sdist = _backend.get_requires_for_build_sdist
prepare_metadata_for_build_wheel = _backend.prepare_metadata_for_build_wheel
build_wheel = _backend.build_wheel
build_sdist = _backend.build_sdist
get_requires_for_build_editable = _backend.get_requires_for_build_editable
prepare_metadata_for_build_editable = _backend.prepare_metadata_for_build_editable
build_editable = _backend.build_editable
