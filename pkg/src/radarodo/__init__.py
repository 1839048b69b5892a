"""4D-radar-inertial odometry: Doppler ego-velocity, GICP and sliding-window pose graphs."""

__version__ = "0.1.0"
