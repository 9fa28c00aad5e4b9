"""Point cloud geometry coding with a learned voxelization front end.

Subpackages and modules:

* ``pcgeom``: clouds, PLY I/O, quantization, octrees, D1/D2 metrics
* ``bitcodec``: binary range coder and the bitstream container
* ``octcodec``: context-adaptive octree occupancy codec
* ``sparsenn``: a small reverse-mode sparse convolution framework
* ``surrogate``: learned occupancy model (rate estimate and lossless codec)
* ``voxnet``: the voxelization network and its joint training step
* ``harness``: synthetic data, training, RD sweeps, BD-rate, reports
"""

__version__ = "0.1.0"
