"""Lung nodule CT segmentation pipeline"""
