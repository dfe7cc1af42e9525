# Generated by Django 4.2.7 on 2026-10-17 14:03

from django.db import migrations, models


class Migration(migrations.Migration):

    dependencies = [
        ('training', '0001_initial'),
    ]

    operations = [
        migrations.AlterField(
            model_name='trainingrun',
            name='stage',
            field=models.CharField(choices=[('coarse', 'Coarse Stage'), ('fine', 'Fine Stage'), ('supervised', 'Supervised Reference'), ('direct', 'Direct Transfer'), ('real_supervised', 'Real-Label Supervised')], max_length=20),
        ),
    ]
