"""Graph learning, calibration and run-artifact services"""
