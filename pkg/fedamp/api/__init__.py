"""
Esquemas de configuração e de arquivos de saída do fedamp.
"""
