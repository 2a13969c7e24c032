import os

RUN_SUBDIRS = ["checkpoints", "plots"]


def create_run_dir(root, run_id, subdirectories=RUN_SUBDIRS):
    """Create ``root/run_id`` plus its sub-directories and return the path.

    A run directory is written once; an existing non-empty one is refused so
    earlier artifacts are never overwritten.
    """
    run_dir = os.path.join(root, run_id)
    if os.path.exists(run_dir) and os.listdir(run_dir):
        raise FileExistsError(f"run directory already populated: {run_dir}")

    os.makedirs(run_dir, exist_ok=True)
    for subdir in subdirectories:
        sub_path = os.path.join(run_dir, subdir)
        if not os.path.exists(sub_path):
            os.makedirs(sub_path)
    return run_dir


def ensure_dir(directory):
    if not directory:
        directory = '.'
    if not os.path.exists(directory):
        os.makedirs(directory, exist_ok=True)
    return directory
