"""
fedamp: simulador determinístico de FedAvg generalizado com atualizações amplificadas
e participação arbitrária de clientes, com diagnósticos de divergência e de concentração.
"""

__version__ = "0.3.0"
