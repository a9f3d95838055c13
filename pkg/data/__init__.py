"""Default settings and synthetic presets"""
