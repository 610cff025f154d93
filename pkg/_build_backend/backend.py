"""Build backend shim.

setup.py in this project is an interactive setup helper (it installs
requirements, creates directories and copies .env), not a setuptools build
script. This shim delegates to setuptools.build_meta but calls setup()
directly so that packaging metadata comes only from pyproject.toml.
"""
from setuptools import build_meta as _build_meta
from setuptools.build_meta import *  # noqa: F401,F403


class _Backend(_build_meta._BuildMetaBackend):
    def run_setup(self, setup_script="setup.py"):
        from setuptools import setup
        setup()


_BACKEND = _Backend()

get_requires_for_build_wheel = _BACKEND.get_requires_for_build_wheel
get_requires_for_build_sdist = _BACKEND.get_requires_for_build_sdist
get_requires_for_build_editable = _BACKEND.get_requires_for_build_editable
prepare_metadata_for_build_wheel = _BACKEND.prepare_metadata_for_build_wheel
prepare_metadata_for_build_editable = _BACKEND.prepare_metadata_for_build_editable
build_wheel = _BACKEND.build_wheel
build_sdist = _BACKEND.build_sdist
build_editable = _BACKEND.build_editable
