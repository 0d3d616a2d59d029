# Tiny RSSI localisation models: training, compression, and size-budget evaluation
