# src/dataset_fetch.py

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import requests

from .data_io import DataError, PathLike

logger = logging.getLogger(__name__)


class FetchError(DataError):
    pass


class ChecksumError(FetchError):
    pass


@dataclass(frozen=True)
class RemoteFile:
    filename: str
    url: str
    digest: str
    algorithm: str = "sha256"


_MNIST_BASE = "https://ossci-datasets.s3.amazonaws.com/mnist/"
_FASHION_BASE = "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/"

# digests as published alongside the mirrors (md5)
DATASETS: Dict[str, List[RemoteFile]] = {
    "mnist": [
        RemoteFile("train-images-idx3-ubyte.gz", _MNIST_BASE + "train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873", "md5"),
        RemoteFile("train-labels-idx1-ubyte.gz", _MNIST_BASE + "train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432", "md5"),
        RemoteFile("t10k-images-idx3-ubyte.gz", _MNIST_BASE + "t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3", "md5"),
        RemoteFile("t10k-labels-idx1-ubyte.gz", _MNIST_BASE + "t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c", "md5"),
    ],
    "fashion": [
        RemoteFile("train-images-idx3-ubyte.gz", _FASHION_BASE + "train-images-idx3-ubyte.gz", "8d4fb7e6c68d591d4c3dfef9ec88bf0d", "md5"),
        RemoteFile("train-labels-idx1-ubyte.gz", _FASHION_BASE + "train-labels-idx1-ubyte.gz", "25c81989df183df01b3e8a0aad5dffbe", "md5"),
        RemoteFile("t10k-images-idx3-ubyte.gz", _FASHION_BASE + "t10k-images-idx3-ubyte.gz", "bef4ecab320f06d8554ea6380940ec79", "md5"),
        RemoteFile("t10k-labels-idx1-ubyte.gz", _FASHION_BASE + "t10k-labels-idx1-ubyte.gz", "bb300cfdad3c16e7a12a480ee83cd310", "md5"),
    ],
}


def file_digest(path: PathLike, algorithm: str = "sha256") -> str:
    h = hashlib.new(algorithm)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _download(remote: RemoteFile, target: Path, timeout: int = 30) -> None:
    partial = target.with_name(target.name + ".part")
    try:
        resp = requests.get(remote.url, timeout=timeout, stream=True)
    except requests.RequestException as e:
        raise FetchError(f"Failed fetching {remote.url}: {e}") from e

    if resp.status_code != 200:
        raise FetchError(f"Failed fetching {remote.url} (status {resp.status_code})")

    try:
        with open(partial, "wb") as f:
            for chunk in resp.iter_content(chunk_size=1 << 16):
                if chunk:
                    f.write(chunk)
    except (requests.RequestException, OSError) as e:
        partial.unlink(missing_ok=True)
        raise FetchError(f"Failed fetching {remote.url}: {e}") from e

    actual = file_digest(partial, remote.algorithm)
    if actual != remote.digest:
        partial.unlink(missing_ok=True)
        raise ChecksumError(
            f"{remote.filename}: {remote.algorithm} {actual} does not match expected {remote.digest}"
        )
    partial.replace(target)


def sha256_sidecar(target: Path) -> Path:
    return target.with_name(target.name + ".sha256")


def _record_sha256(target: Path) -> str:
    """Write `<file>.sha256` in sha256sum format once the published digest has matched."""
    digest = file_digest(target, "sha256")
    sha256_sidecar(target).write_text(f"{digest}  {target.name}\n", encoding="utf-8")
    return digest


def _verify_present(remote: RemoteFile, target: Path) -> None:
    if file_digest(target, remote.algorithm) != remote.digest:
        raise ChecksumError(
            f"{target} exists with a different {remote.algorithm} digest; refusing to overwrite"
        )
    sidecar = sha256_sidecar(target)
    if not sidecar.exists():
        _record_sha256(target)
        return
    expected = sidecar.read_text(encoding="utf-8").split()[0]
    if file_digest(target, "sha256") != expected:
        raise ChecksumError(f"{target} does not match its recorded sha256 {expected}")


def fetch(name: str, target_dir: PathLike, files: Optional[List[RemoteFile]] = None) -> List[Path]:
    """
    Download a dataset's IDX files into `target_dir`, verifying each published
    digest and recording the file's sha256 next to it. Files already present
    with the right digests are left alone; a present file with a different
    digest is never overwritten.
    """
    if files is None:
        if name not in DATASETS:
            raise FetchError(f"unknown dataset '{name}', expected one of {sorted(DATASETS)}")
        files = DATASETS[name]

    root = Path(target_dir)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for remote in files:
        target = root / remote.filename
        if target.exists():
            _verify_present(remote, target)
            logger.info("%s already present, checksum ok", target)
        else:
            logger.info("downloading %s", remote.url)
            _download(remote, target)
            logger.info("%s verified, sha256 %s", target, _record_sha256(target))
        paths.append(target)
    return paths


def dataset_paths(root: PathLike, name: str = "mnist") -> Tuple[Path, Path, Path, Path]:
    """(train images, train labels, test images, test labels) under a fetch directory."""
    files = [Path(root) / f.filename for f in DATASETS[name]]
    return files[0], files[1], files[2], files[3]
