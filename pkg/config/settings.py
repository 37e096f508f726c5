import os

from dotenv import load_dotenv

load_dotenv()

DGPIC_CONFIG = {
    "logging": {
        "level": os.getenv("LOG_LEVEL", "INFO")
    },

    "runtime": {
        # 0 = one worker per CPU
        "threads": int(os.getenv("DGPIC_THREADS", 0)),
        "out_dir": os.getenv("DGPIC_OUT_DIR", "runs")
    }
}


def worker_count():
    threads = int(os.getenv("DGPIC_THREADS", DGPIC_CONFIG["runtime"]["threads"]))
    return threads if threads > 0 else (os.cpu_count() or 1)
