from prefixbatch.cli import main

main()
