import os
import sys

# Under ctest, import the module from the build tree even if an editable
# install is present (its import hook would otherwise take precedence).
_build_dir = os.environ.get("DECFL_BUILD_PYTHON_DIR")
if _build_dir:
    sys.meta_path[:] = [f for f in sys.meta_path if "ScikitBuild" not in type(f).__name__]
    sys.path.insert(0, _build_dir)
    for name in [m for m in sys.modules if m == "decfl" or m.startswith("decfl.")]:
        del sys.modules[name]
