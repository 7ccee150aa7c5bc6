#!/usr/bin/env python3
"""
Tool morphology experiments: continual optimization vs. single-batch and
naive sequential baselines on the Winding, Flipping and Pushing scenes, plus
loss-landscape slices (Reaching vs. Winding).

Run:
  python tool_morph_eval.py run --scenario Pushing
  python tool_morph_eval.py run --config configs/pushing_desk.yaml --jobs 4
  python tool_morph_eval.py summarize --out results/pushing

Environment (.env is loaded if present):
  TOOL_MORPH_OUT_DIR    default output directory
  TOOL_MORPH_JOBS       default number of rollout workers
  TOOL_MORPH_LOG_LEVEL  logging level (INFO)
"""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from tool_morph.harness import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
