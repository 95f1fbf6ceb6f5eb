"""Tests for evolving-solver"""
