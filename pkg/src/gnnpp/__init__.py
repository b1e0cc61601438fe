"""Graph neural network post-processing of station ensemble forecasts."""
