from datetime import datetime

from wildmoco.config import verbose as default_verbose


def write_log(data, file=None, verbose=None, level="INFO"):
    if verbose is None:
        verbose = default_verbose
    current_date_time_str = datetime.now().strftime('%Y-%m-%d %H:%M:%S')
    line = current_date_time_str + "||" + level + "||" + str(data)
    if verbose or level != "INFO":
        print(line)
    if file:
        file.write(line + "\n")
        file.flush()
