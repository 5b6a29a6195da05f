"""Two-stage spatio-temporal fusion of geolocated cellular-traffic flows
and sparse camera vehicle flows, for predicting vehicle flow at
camera-free road segments."""

__version__ = "0.1.0"
