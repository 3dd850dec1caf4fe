import argparse
import logging
import tarfile
from pathlib import Path

import requests

from maskfed.utils.utils import ExperimentConfig

logger = logging.getLogger(__name__)

# configs
CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
ARCHIVE_NAME = "cifar-10-binary.tar.gz"
BACKUP_NAME = "cifar-10-binary_last.tar.gz"
BATCHES_DIR = "cifar-10-batches-bin"


def download_file(url: str, path: Path) -> None:
    with requests.get(url, stream=True) as r:
        r.raise_for_status()
        with Path.open(path, "wb") as f:
            for chunk in r.iter_content(chunk_size=8192):
                f.write(chunk)


def extract_batches(archive: Path, directory: Path) -> list[Path]:
    """Unpack the regular files under cifar-10-batches-bin/, flattening any
    other path components."""
    target = directory / BATCHES_DIR
    target.mkdir(parents=True, exist_ok=True)
    written = []
    with tarfile.open(archive, "r:gz") as tar:
        for member in tar.getmembers():
            parts = Path(member.name).parts
            if not member.isfile() or BATCHES_DIR not in parts:
                continue
            source = tar.extractfile(member)
            assert source is not None
            out = target / Path(member.name).name
            out.write_bytes(source.read())
            written.append(out)
    logger.info(f"Extracted {len(written)} files to {target}")
    return written


def download_cifar10(
    directory: Path, url: str = CIFAR10_URL, backup: bool = True
) -> list[Path]:
    fp = Path(directory, ARCHIVE_NAME)
    backup_fp = Path(directory, BACKUP_NAME)
    if backup and fp.is_file():
        fp.rename(backup_fp)
    try:
        download_file(url, fp)
    except requests.HTTPError as e:
        if backup and backup_fp.is_file():
            backup_fp.rename(fp)
        raise e
    return extract_batches(fp, Path(directory))


def main(config: ExperimentConfig) -> None:
    if config.dataset.path is None:
        logger.error("Config does not set dataset.path, doing nothing.")
        return
    directory = Path(config.dataset.path).parent
    logger.info(f"CIFAR-10 data will be downloaded in: {directory}")
    if directory.is_dir():
        download_cifar10(directory)
    else:
        logger.error(f"The directory {directory.as_posix()} does not exist.")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Downloads CIFAR-10 data.")
    parser.add_argument(
        "--config",
        help="config file path (default: ./config.yaml)",
        default="config.yaml",
    )
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO)
    main(ExperimentConfig.from_file(Path(args.config)))
