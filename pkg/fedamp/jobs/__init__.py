"""
Jobs da CLI: execução, varredura, diagnósticos, verificações de concentração, gráficos e a
comparação com disponibilidade periódica.
"""
